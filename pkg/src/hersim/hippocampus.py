"""CA3 filtering slices: learning gates, allocation, replay and post-use decay.

A slice is a small group of non-segmenting sequence memories placed between two
rungs. It watches the concatenated output of a group of columns, and while it
is allocated its Known/Unknown vote decides which layers of the columns above
(and the L5 of the columns below) may learn.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

from .sdr_core import ContractError, Sdr
from .sequence_memory import (
    KNOWN,
    LAYER_DEFAULTS,
    UNKNOWN,
    HysteresisParams,
    KnowledgeState,
    SequenceMemory,
    recall_burst,
)


@dataclass(frozen=True)
class LearnGates:
    """Which layers may learn this cycle.

    The ``*_above`` flags apply to the column sitting above the slice that
    produced them, ``l5_below`` to the columns feeding it.
    """

    l1_above: bool = True
    l23_above: bool = True
    l4_above: bool = True
    l6a_above: bool = True
    l6b_above: bool = True
    l5_below: bool = True
    prune_allowed_below: bool = False

    @property
    def l6ab_above(self) -> bool:
        return self.l6a_above and self.l6b_above

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


ALL_OPEN = LearnGates()
ALL_CLOSED = LearnGates(False, False, False, False, False, False, False)


def gating_rules(ca3_present: bool, ca3_state: KnowledgeState | None,
                 l23_above_state: KnowledgeState | None) -> LearnGates:
    """The learning-gating algorithm, transcribed branch by branch.

    if CA3 present:
        if CA3 unknown: learning in CC above disabled; L5 below disabled
        else: L1, L23, L4 above enabled
              if L23 above unknown: L6a/b above disabled, L5 below disabled
              else: L6a/b above enabled, L5 below enabled
    else: L4/L1/L6b above disabled; L23/L6a above and L5 below enabled
    """
    if ca3_present:
        if ca3_state is not KNOWN:
            return LearnGates(False, False, False, False, False, False, False)
        if l23_above_state is not KNOWN:
            return LearnGates(True, True, True, False, False, False, False)
        return LearnGates(True, True, True, True, True, True, False)
    return LearnGates(l1_above=False, l23_above=True, l4_above=False, l6a_above=True,
                      l6b_above=False, l5_below=True, prune_allowed_below=True)


def allocate_policy(next_rung_l6a_states: Sequence[KnowledgeState]) -> bool:
    """True (allocate) while any covered next-rung L6a is Unknown."""
    states = list(next_rung_l6a_states)
    if not states:
        raise ContractError("allocate_policy needs at least one covered column")
    return any(s is not KNOWN for s in states)


@dataclass
class SliceStep:
    state: KnowledgeState
    swr: list | None = None


class FilteringSlice:
    """Replicated CA3 memories over the concatenated outputs of a column group.

    Parameters
    ----------
    part_widths : width of each source's contribution to the concatenated input.
    rngs : one random stream per replica.
    part_active : typical active bits of one source symbol; sets the segment
        threshold and the minimum size of a recalled item.
    decay_horizon : steps over which a deallocated slice forgets everything.
    """

    def __init__(self, part_widths: Sequence[int], rngs, params: HysteresisParams | None = None,
                 part_active: int = 4, decay_horizon: int = 10_000, decay_interval: int = 100,
                 swr_max_len: int = 10):
        self.part_widths = tuple(int(w) for w in part_widths)
        self.width = sum(self.part_widths)
        self.params = params or LAYER_DEFAULTS["ca3"]
        self.part_active = int(part_active)
        thr = max(1, math.ceil(0.5 * self.part_active))
        self.memories = [SequenceMemory(self.width, self.params, r, thr, context_reset=False)
                         for r in rngs]
        self.vote_threshold = len(self.memories) // 2 + 1
        self.allocated = True
        self.decay_horizon = int(decay_horizon)
        self.decay_interval = int(decay_interval)
        self.swr_max_len = int(swr_max_len)
        self._idle = 0
        self.steps = 0

    @property
    def state(self) -> KnowledgeState:
        known = sum(1 for m in self.memories if m.state is KNOWN)
        return KNOWN if known >= self.vote_threshold else UNKNOWN

    def synaptic_load(self) -> int:
        return sum(m.synaptic_load() for m in self.memories)

    def set_allocated(self, flag: bool) -> bool:
        """Update allocation; returns True when the flag actually changed."""
        flag = bool(flag)
        changed = flag != self.allocated
        self.allocated = flag
        if changed:
            self._idle = 0
        return changed

    def step(self, concat_input: Sdr, want_swr: bool = False) -> SliceStep:
        if not self.allocated:
            return SliceStep(self.state)
        if concat_input.width != self.width:
            raise ContractError("slice input width mismatch")
        for m in self.memories:
            m.step(concat_input, learn_enabled=True)
        self.steps += 1
        swr = None
        if want_swr and self.state is KNOWN:
            swr = self.swr_replay(concat_input)
        return SliceStep(self.state, swr)

    def swr_replay(self, seed: Sdr, symbol_width_cap: int | None = None) -> list[Sdr]:
        """Recall a ripple from the slice's own predictions, learning off."""
        return recall_burst(self.memories, seed, self.vote_threshold, self.swr_max_len,
                            min_bits=self.part_active, max_bits=symbol_width_cap,
                            present_seed=False)

    def tick(self) -> None:
        """Per-cycle housekeeping: forget gradually while deallocated."""
        if self.allocated:
            return
        self._idle += 1
        if self._idle % self.decay_interval == 0 and self.synaptic_load():
            amount = int(math.ceil(65535 * self.decay_interval / self.decay_horizon))
            for m in self.memories:
                m.decay(amount)

    def to_state(self) -> dict:
        return {
            "part_widths": list(self.part_widths),
            "part_active": self.part_active,
            "allocated": self.allocated,
            "decay_horizon": self.decay_horizon,
            "decay_interval": self.decay_interval,
            "swr_max_len": self.swr_max_len,
            "idle": self._idle,
            "steps": self.steps,
            "memories": [m.to_state() for m in self.memories],
        }

    @classmethod
    def from_state(cls, st: dict) -> "FilteringSlice":
        s = cls.__new__(cls)
        s.part_widths = tuple(st["part_widths"])
        s.width = sum(s.part_widths)
        s.part_active = st["part_active"]
        s.memories = [SequenceMemory.from_state(m) for m in st["memories"]]
        s.params = s.memories[0].params if s.memories else LAYER_DEFAULTS["ca3"]
        s.vote_threshold = len(s.memories) // 2 + 1
        s.allocated = st["allocated"]
        s.decay_horizon = st["decay_horizon"]
        s.decay_interval = st["decay_interval"]
        s.swr_max_len = st["swr_max_len"]
        s._idle = st["idle"]
        s.steps = st["steps"]
        return s
