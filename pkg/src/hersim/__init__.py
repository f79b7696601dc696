"""Event-driven simulator of a hierarchy of cortical columns that segment
streams into sequences and pass symbols upward."""
from .cortex import Cortex, CortexConfig, RungConfig, build_cortex, cortex_step
from .sdr_core import ContractError, PredictionMultiset, Sdr, TaggedSdr

__all__ = [
    "ContractError",
    "Cortex",
    "CortexConfig",
    "PredictionMultiset",
    "RungConfig",
    "Sdr",
    "TaggedSdr",
    "build_cortex",
    "cortex_step",
]
