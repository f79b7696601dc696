"""Corticothalamic loop (speculative forwarding) and the MGN input filter."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .sdr_core import ContractError, PredictionMultiset, Sdr, TaggedSdr


@dataclass(frozen=True)
class MatchLimits:
    min_bits: int
    max_bits: int

    def __post_init__(self):
        if self.min_bits > self.max_bits:
            raise ContractError("MatchLimits needs min_bits <= max_bits")

    @classmethod
    def exact(cls, n: int) -> "MatchLimits":
        return cls(n, n)


def ctloop_match(l5_pred: Optional[Sdr], l6a_plus_preds: Sequence[PredictionMultiset],
                 limits: MatchLimits) -> Optional[Sdr]:
    """Intersect the L5 forward prediction with every successor's expectation.

    The match is forwarded only when its size lies within ``limits``; a wide
    match means the layers are predicting a union of symbols.
    """
    if l5_pred is None or not l6a_plus_preds:
        return None
    bits = set(l5_pred.active)
    for p in l6a_plus_preds:
        if p.width != l5_pred.width:
            raise ContractError("ctloop_match width mismatch")
        bits &= p.counts.keys()
        if not bits:
            return None
    if limits.min_bits <= len(bits) <= limits.max_bits:
        return Sdr(l5_pred.width, bits)
    return None


def forwarding_eligibility(successors_forwarding: Sequence[bool], attention_on: bool,
                           top_rung: bool = False) -> bool:
    if not attention_on:
        return False
    if top_rung:
        return True
    return all(successors_forwarding)


@dataclass
class CtloopState:
    """Per-column bookkeeping for the runaway limit."""

    last_forward: Optional[Sdr] = None
    repeat: int = 0

    def register(self, symbol: Sdr, limit: int) -> bool:
        """Record a forward; returns False once the same symbol would exceed ``limit``."""
        if self.last_forward is not None and symbol == self.last_forward:
            if self.repeat >= limit:
                return False
            self.repeat += 1
        else:
            self.last_forward = symbol
            self.repeat = 1
        return True

    def clear(self) -> None:
        self.last_forward = None
        self.repeat = 0


@dataclass
class MgnState:
    """Per-flow repeat tracking in front of the first rung."""

    t_rep: int = 2
    last: list = field(default_factory=list)
    repeats: list = field(default_factory=list)
    suppressed_count: int = 0
    passed_count: int = 0

    def ensure(self, n_flows: int) -> None:
        while len(self.last) < n_flows:
            self.last.append(None)
            self.repeats.append(0)


def mgn_filter(mgn: MgnState, flow_index: int, flow: Optional[TaggedSdr],
               l6_plus_pred: Optional[Sdr], ca3_above_present: bool) -> Optional[TaggedSdr]:
    """Suppress flows that keep repeating and, when no CA3 is allocated above,
    strip bits the first rung does not expect.

    If stripping would remove every bit the raw flow is passed on, so that
    genuine novelty still reaches the cortex.
    """
    mgn.ensure(flow_index + 1)
    if flow is None:
        mgn.last[flow_index] = None
        mgn.repeats[flow_index] = 0
        return None
    if mgn.last[flow_index] is not None and flow.sdr == mgn.last[flow_index]:
        mgn.repeats[flow_index] += 1
    else:
        mgn.last[flow_index] = flow.sdr
        mgn.repeats[flow_index] = 1
    if mgn.repeats[flow_index] > mgn.t_rep:
        mgn.suppressed_count += 1
        return None
    mgn.passed_count += 1
    if not ca3_above_present and l6_plus_pred is not None and l6_plus_pred.active:
        kept = flow.sdr.bits & l6_plus_pred.bits
        if kept:
            return TaggedSdr(Sdr(flow.sdr.width, kept), flow.tag)
    return flow
