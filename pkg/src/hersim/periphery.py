"""Front-end: band binarization with slow gain control, DR codewords, the fixed
DCN sparsifier, and a synthetic symbolic stream generator for desk-scale runs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .projector import Projector, ProjectorConfig
from .sdr_core import ContractError, Sdr, TaggedSdr, concat, rng_stream
from .sequence_memory import ema_update

K_STEP = 4e-5
ALPHA_ACT = 1.0 / 25_000


# -- MOCR gain control ---------------------------------------------------------------
@dataclass
class MocrState:
    """Binarization threshold of one band plus the slow activity average driving it."""

    thr: float
    act_ema: float
    act_tup: float = 14.0
    act_tdown: float = 13.0
    k_step: float = K_STEP
    alpha_act: float = ALPHA_ACT

    def __post_init__(self):
        if self.thr <= 0:
            raise ContractError("MOCR threshold must be positive")
        if not self.act_tdown < self.act_tup:
            raise ContractError("act_tdown must be below act_tup")


def mocr_adjust(thr: float, act_ema: float, act_tup: float, act_tdown: float, k_step: float) -> float:
    """Threshold correction for a given activity average (no EMA update)."""
    if act_ema > act_tup:
        return thr * (1.0 + (act_ema - act_tup) / act_tup * k_step)
    if act_ema < act_tdown:
        return thr * (1.0 - (act_tdown - act_ema) / act_tdown * k_step)
    return thr


def mocr_update(state: MocrState, act_now: float) -> float:
    """Fold ``act_now`` into the activity average and nudge the threshold.

    Too much activity raises the threshold, too little lowers it, so the loop
    is a negative-feedback controller.
    """
    if act_now < 0:
        raise ContractError("activity cannot be negative")
    state.act_ema = ema_update(state.act_ema, act_now, state.alpha_act)
    state.thr = mocr_adjust(state.thr, state.act_ema, state.act_tup, state.act_tdown, state.k_step)
    return state.thr


# -- DR code -----------------------------------------------------------------------------------
@dataclass(frozen=True)
class DrCode:
    ones_set: Sdr
    zeros_set: Sdr

    def __post_init__(self):
        if not self.zeros_set.bits <= self.ones_set.bits:
            raise ContractError("zeros_set must be nested inside ones_set")

    @classmethod
    def random(cls, rng: np.random.Generator, width: int = 121, n_ones: int = 40,
               n_zeros: int = 10) -> "DrCode":
        ones = rng.choice(width, size=n_ones, replace=False)
        zeros = rng.choice(ones, size=n_zeros, replace=False)
        return cls(Sdr(width, ones.tolist()), Sdr(width, zeros.tolist()))


def binarize_and_encode(energies: Sequence[float], mocr_states: Sequence[MocrState],
                        dr_codes: Sequence[DrCode]) -> list[Sdr]:
    if not len(energies) == len(mocr_states) == len(dr_codes):
        raise ContractError("band count mismatch between energies, MOCR states and DR codes")
    out = []
    for e, st, code in zip(energies, mocr_states, dr_codes):
        sdr = code.ones_set if e >= st.thr else code.zeros_set
        mocr_update(st, len(sdr))
        out.append(sdr)
    return out


# -- DCN --------------------------------------------------------------------------------------------
def make_dcn(in_width: int, out_width: int, rng: np.random.Generator,
             receptive_field: float = 0.10, sparsity: float = 0.02) -> Projector:
    """Fixed-weight k-WTA: every output fully connected to a small random patch."""
    k = max(1, int(round(sparsity * out_width)))
    cfg = ProjectorConfig(in_width, out_width, k, potential_fraction=receptive_field,
                          connected_fraction_of_potential=1.0, plastic=False)
    return Projector(cfg, rng)


def dcn_project(dcn: Projector, band_sdrs: Sequence[Sdr]) -> Sdr:
    return dcn.project(concat(band_sdrs))


class AuditoryFrontEnd:
    """Bands -> MOCR binarization -> DR code -> one DCN per flow (tonotopic groups)."""

    def __init__(self, n_bands: int, n_flows: int, master_seed: int = 0, flow_width: int = 121,
                 band_width: int = 121, thr0: float = 1.0, act0: float = 13.5, **mocr_kw):
        if n_bands % n_flows:
            raise ContractError("bands must split evenly across flows")
        self.n_bands, self.n_flows = n_bands, n_flows
        self.mocr = [MocrState(thr0, act0, **mocr_kw) for _ in range(n_bands)]
        self.codes = [DrCode.random(rng_stream(master_seed, f"dr/{b}"), band_width) for b in range(n_bands)]
        per = n_bands // n_flows
        self.dcn = [make_dcn(per * band_width, flow_width, rng_stream(master_seed, f"dcn/{f}"))
                    for f in range(n_flows)]

    def encode(self, energies: Sequence[float], tag=(0, 0)) -> list[TaggedSdr]:
        bands = binarize_and_encode(energies, self.mocr, self.codes)
        per = self.n_bands // self.n_flows
        return [TaggedSdr(dcn_project(d, bands[f * per:(f + 1) * per]), tuple(tag))
                for f, d in enumerate(self.dcn)]


def read_feature_file(path: str | Path) -> np.ndarray:
    """Parse a ``bands=<n> frame_ms=1`` headed CSV of band energies."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ContractError("empty feature file")
    try:
        header = dict(kv.split("=", 1) for kv in lines[0].split())
        n = int(header["bands"])
        frame_ms = float(header["frame_ms"])
    except (KeyError, ValueError) as e:
        raise ContractError(f"bad feature file header: {lines[0]!r}") from e
    if frame_ms != 1:
        raise ContractError("only 1 ms frames are supported")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()]
    arr = np.asarray(rows, dtype=float).reshape(-1, n) if rows else np.zeros((0, n))
    if any(len(r) != n for r in rows):
        raise ContractError("row length does not match the band count")
    return arr


# -- synthetic symbolic streams ---------------------------------------------------------------
@dataclass
class SymbolAlphabet:
    symbols: list

    @classmethod
    def generate(cls, size: int, width: int, active: int, overlap_cap: int,
                 rng: np.random.Generator, max_tries: int = 10_000) -> "SymbolAlphabet":
        out: list[Sdr] = []
        tries = 0
        while len(out) < size:
            tries += 1
            if tries > max_tries * max(1, size):
                raise ContractError("could not satisfy the overlap cap; widen the alphabet space")
            cand = Sdr(width, rng.choice(width, size=active, replace=False).tolist())
            if all(len(cand.bits & s.bits) <= overlap_cap for s in out):
                out.append(cand)
        return cls(out)

    def __getitem__(self, i: int) -> Sdr:
        if not 0 <= i < len(self.symbols):
            raise ContractError(f"unknown symbol id {i}")
        return self.symbols[i]

    def __len__(self) -> int:
        return len(self.symbols)


@dataclass
class StreamSpec:
    sentences: list
    alphabet_size: int = 0
    width: int = 121
    active: int = 4
    overlap_cap: int = 1
    order: str = "sequential"
    repeats: int = 1
    seed: int = 0
    n_flows: int = 1
    flow_shift: int = 0

    def __post_init__(self):
        if not self.sentences:
            raise ContractError("a stream needs at least one sentence")
        top = max(max(s) for s in self.sentences)
        if not self.alphabet_size:
            self.alphabet_size = top + 1
        if top >= self.alphabet_size or min(min(s) for s in self.sentences) < 0:
            raise ContractError("sentence refers to an unknown symbol id")
        if self.order not in ("sequential", "shuffle"):
            raise ContractError("order must be 'sequential' or 'shuffle'")


def make_alphabets(spec: StreamSpec) -> list[SymbolAlphabet]:
    return [SymbolAlphabet.generate(spec.alphabet_size, spec.width, spec.active, spec.overlap_cap,
                                    rng_stream(spec.seed, f"alphabet/{f}"))
            for f in range(spec.n_flows)]


def sentence_order(spec: StreamSpec) -> list[int]:
    rng = rng_stream(spec.seed, "order")
    out = []
    for _ in range(spec.repeats):
        ids = list(range(len(spec.sentences)))
        if spec.order == "shuffle":
            ids = rng.permutation(len(ids)).tolist()
        out.extend(ids)
    return out


def synthetic_stream(spec: StreamSpec, flow: int = 0,
                     alphabets: Optional[list[SymbolAlphabet]] = None) -> Iterator[TaggedSdr]:
    """Yield tagged symbols for one flow; tags are (sentence id, offset)."""
    alph = (alphabets or make_alphabets(spec))[flow]
    for sid in sentence_order(spec):
        sent = spec.sentences[sid]
        n = len(sent)
        for off in range(n):
            sym = sent[(off + flow * spec.flow_shift) % n]
            yield TaggedSdr(alph[sym], (sid, off))


def multi_flow_stream(spec: StreamSpec) -> Iterator[list[TaggedSdr]]:
    """Yield one item per flow per step (all flows share the sentence schedule)."""
    alph = make_alphabets(spec)
    its = [synthetic_stream(spec, f, alph) for f in range(spec.n_flows)]
    yield from (list(items) for items in zip(*its))


def period_length(spec: StreamSpec) -> int:
    return sum(len(s) for s in spec.sentences)
