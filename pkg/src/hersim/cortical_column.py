"""Cortical column: L4 projectors, L23 trackers, L6a/L6b, L1 symbol builder and L5.

Per cycle the column sees one optional input per module (module 0 is the
vertical flow from the aligned predecessor, the rest are lateral flows). L6a and
L6b consume the vertical input as it arrives; L4 and L23 lag one delivery
behind, so when L6b flags the end of a sequence, L23 has just processed the last
element of that sequence and L1 can pool its correctly predicted branches into
a symbol.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .hippocampus import ALL_OPEN, LearnGates
from .projector import Projector, ProjectorConfig
from .sdr_core import (
    ContractError,
    PredictionMultiset,
    Sdr,
    TaggedSdr,
    concat,
    multiset_merge,
    rng_stream,
)
from .sequence_memory import (
    KNOWN,
    LAYER_DEFAULTS,
    UNKNOWN,
    HysteresisParams,
    KnowledgeState,
    SequenceMemory,
    _logistic,
    hysteresis_step,
)


def _params_field(layer):
    return field(default_factory=lambda: LAYER_DEFAULTS[layer])


@dataclass
class ColumnConfig:
    n_modules: int = 1
    replicas_l23_l4: int = 2
    replicas_l6: int = 1
    replicas_l5: int = 2
    module_width: int = 121
    symbol_active: int = 4
    input_widths: tuple = (121,)
    input_active: tuple = (4,)
    branches_per_cell: int = 4
    l23: HysteresisParams = _params_field("l23")
    l6a: HysteresisParams = _params_field("l6a")
    l6b: HysteresisParams = _params_field("l6b")
    l5: HysteresisParams = _params_field("l5")
    l4_prune_rate: float = 0.05
    l1_prune_rate: float = 0.05
    # 0: pool L23 state at the boundary cycle; 1: one delivery earlier
    symbol_offset: int = 0

    def __post_init__(self):
        self.input_widths = tuple(int(w) for w in self.input_widths)
        self.input_active = tuple(int(a) for a in self.input_active)
        if self.module_width <= self.symbol_active:
            raise ContractError("module_width must exceed symbol_active")
        if min(self.replicas_l23_l4, self.replicas_l6, self.replicas_l5, self.n_modules) < 1:
            raise ContractError("replica and module counts must be >= 1")
        if len(self.input_widths) != self.n_modules or len(self.input_active) != self.n_modules:
            raise ContractError("one input width/activity per module is required")
        if self.symbol_offset not in (0, 1):
            raise ContractError("symbol_offset must be 0 or 1")

    @property
    def symbol_width(self) -> int:
        return self.n_modules * self.module_width

    @property
    def symbol_bits(self) -> int:
        return self.n_modules * self.symbol_active

    def layer_params(self, layer: str) -> HysteresisParams:
        return getattr(self, layer).replace(branches_per_cell=self.branches_per_cell)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_widths"] = list(self.input_widths)
        d["input_active"] = list(self.input_active)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnConfig":
        d = dict(d)
        for layer in ("l23", "l6a", "l6b", "l5"):
            if isinstance(d.get(layer), dict):
                d[layer] = HysteresisParams(**d[layer])
        return cls(**d)


class ColumnOutput(NamedTuple):
    symbol: Optional[TaggedSdr]
    eos: bool
    feedback_to_prev: PredictionMultiset
    l5_prediction: Optional[Sdr]
    l6_states: dict
    speculative: bool = False


def modulation_from_l6a(l6a_ema: float, l6a_state: KnowledgeState, params: HysteresisParams,
                        steepness: float = 1000.0) -> float:
    centre = params.down if l6a_state is UNKNOWN else params.up
    return _logistic(steepness * (l6a_ema - centre))


def layer_state(prev: KnowledgeState, memories, params: HysteresisParams) -> KnowledgeState:
    """Layer-level hysteresis driven by the replicas' averaged anomaly EMA."""
    aema = float(np.mean([m.ema_as for m in memories]))
    return hysteresis_step(prev, aema, params)[0]


class CorticalColumn:
    def __init__(self, cfg: ColumnConfig, master_seed: int = 0, path: str = "col"):
        self.cfg = cfg
        self.path = path
        rs = lambda name: rng_stream(master_seed, f"{path}/{name}")
        cw, sa, b = cfg.module_width, cfg.symbol_active, cfg.branches_per_cell
        self.l4 = [[Projector(ProjectorConfig(cfg.input_widths[k], cw, sa, prune_rate=cfg.l4_prune_rate),
                              rs(f"l4/{k}/{r}")) for r in range(cfg.replicas_l23_l4)]
                   for k in range(cfg.n_modules)]
        thr23 = max(1, math.ceil(0.5 * sa))
        self.l23 = [[SequenceMemory(cw, cfg.layer_params("l23"), rs(f"l23/{k}/{r}"), thr23)
                     for r in range(cfg.replicas_l23_l4)] for k in range(cfg.n_modules)]
        thr6 = max(1, math.ceil(0.5 * cfg.input_active[0]))
        self.l6a = [SequenceMemory(cfg.input_widths[0], cfg.layer_params("l6a"), rs(f"l6a/{r}"), thr6)
                    for r in range(cfg.replicas_l6)]
        self.l6b = SequenceMemory(cfg.input_widths[0], cfg.layer_params("l6b"), rs("l6b"), thr6)
        self.l1_in_width = cfg.n_modules * cfg.replicas_l23_l4 * cw * b
        self.l1 = [Projector(ProjectorConfig(self.l1_in_width, cw, sa, prune_rate=cfg.l1_prune_rate),
                             rs(f"l1/{k}")) for k in range(cfg.n_modules)]
        thr5 = max(1, math.ceil(0.5 * cfg.symbol_bits))
        self.l5 = [SequenceMemory(cfg.symbol_width, cfg.layer_params("l5"), rs(f"l5/{r}"), thr5)
                   for r in range(cfg.replicas_l5)]
        self.pending: list[Optional[TaggedSdr]] = [None] * cfg.n_modules
        self.l23_last = [[None] * cfg.replicas_l23_l4 for _ in range(cfg.n_modules)]
        self.l23_prev = [[None] * cfg.replicas_l23_l4 for _ in range(cfg.n_modules)]
        self.l23_state = UNKNOWN
        self._l6a_state = UNKNOWN
        self.modulation_m = 0.0
        self.fb_l1: PredictionMultiset = PredictionMultiset(cfg.symbol_width)
        self.fb_l4: list[PredictionMultiset] = [PredictionMultiset(w) for w in cfg.input_widths]
        self.muted = False
        self.ahead = 0
        self.skip_real = 0
        self.last_tag: tuple = (-1, -1)
        self.last_symbol: Optional[Sdr] = None
        self._update_modulation()

    # -- small queries ------------------------------------------------------
    @property
    def l6a_state(self) -> KnowledgeState:
        return self._l6a_state

    @property
    def l6a_ema(self) -> float:
        return float(np.mean([m.ema_as for m in self.l6a]))

    def l6a_prediction(self) -> PredictionMultiset:
        return multiset_merge([m.predicted_next() for m in self.l6a], self.cfg.input_widths[0])

    def l6_states(self) -> dict:
        return {
            "l6a": (self.l6a_state, self.l6a_ema),
            "l6b": (self.l6b.state, self.l6b.ema_as),
            "l23": self.l23_state,
            "m": self.modulation_m,
        }

    def synaptic_load(self) -> dict:
        return {
            "l23": sum(m.synaptic_load() for row in self.l23 for m in row),
            "l6a": sum(m.synaptic_load() for m in self.l6a),
            "l6b": self.l6b.synaptic_load(),
            "l5": sum(m.synaptic_load() for m in self.l5),
        }

    def total_synaptic_load(self) -> int:
        return sum(self.synaptic_load().values())

    def distal_memories(self) -> list[SequenceMemory]:
        return [m for row in self.l23 for m in row] + self.l6a + [self.l6b] + self.l5

    def projectors(self) -> list[Projector]:
        return [p for row in self.l4 for p in row] + self.l1

    # -- modulation ------------------------------------------------------------
    def _update_modulation(self) -> None:
        m = modulation_from_l6a(self.l6a_ema, self.l6a_state, self.cfg.layer_params("l6a"))
        self.modulation_m = m
        for row in self.l23:
            for sm in row:
                sm.modulation_m = m
        self.l6b.modulation_m = m

    def set_l5_modulation(self, m: float) -> None:
        for sm in self.l5:
            sm.modulation_m = m

    # -- feedback latching -------------------------------------------------------
    def latch_l1_feedback(self, fb: PredictionMultiset) -> None:
        if fb.width != self.cfg.symbol_width:
            raise ContractError("L1 feedback width mismatch")
        self.fb_l1 = fb

    def latch_l4_feedback(self, module: int, fb: PredictionMultiset) -> None:
        if fb.width != self.cfg.input_widths[module]:
            raise ContractError("L4 feedback width mismatch")
        self.fb_l4[module] = fb

    # -- CTLoop hooks -------------------------------------------------------------
    def mute(self, on: bool) -> None:
        on = bool(on)
        if on == self.muted:
            return
        self.muted = on
        if not on:
            # forwarded items the real stream has not reached yet are skipped
            self.skip_real += self.ahead
            self.ahead = 0

    def l5_forward_prediction(self) -> Optional[Sdr]:
        sups = [m.predicted_support() for m in self.l5]
        first = sups[0]
        if not first.active or any(s != first for s in sups[1:]):
            return None
        return first

    def feed_l5(self, symbol: Sdr, learn: bool) -> None:
        for m in self.l5:
            m.step(symbol, learn)

    def note_forwarded(self, symbol: Sdr) -> None:
        self.ahead += 1
        self.last_symbol = symbol

    # -- pipeline -------------------------------------------------------------------
    def _l4_l23(self, k: int, x: Sdr, gates: LearnGates) -> None:
        for r, (p, sm) in enumerate(zip(self.l4[k], self.l23[k])):
            fb = p.expected_outputs(self.fb_l4[k]) if self.fb_l4[k].counts else None
            y = p.project(x, fb)
            if gates.l4_above:
                p.learn(x, y)
            self.l23_prev[k][r] = self.l23_last[k][r]
            self.l23_last[k][r] = sm.step(y, gates.l23_above)
        self.l23_state = layer_state(self.l23_state, [sm for row in self.l23 for sm in row],
                                     self.cfg.layer_params("l23"))

    def replay_l4(self, module: int, item: Sdr, gates: LearnGates) -> None:
        """Present a replayed item to L4 only; the projection is not passed to L23."""
        if item.width != self.cfg.input_widths[module]:
            raise ContractError("replay item width mismatch")
        if len(item) > 1.5 * self.cfg.input_active[module]:
            return
        for p in self.l4[module]:
            y = p.project(item)
            if gates.l4_above and y.active:
                p.learn(item, y)

    def _l1_input(self) -> Sdr:
        cw, b = self.cfg.module_width, self.cfg.branches_per_cell
        block = cw * b
        hist = self.l23_last if self.cfg.symbol_offset == 0 else self.l23_prev
        correct, winners = [], []
        for k, row in enumerate(hist):
            for r, res in enumerate(row):
                if res is None:
                    continue
                off = (k * self.cfg.replicas_l23_l4 + r) * block
                correct.extend(off + br for br in res.correctly_predicted_branches)
                winners.extend(off + br for br in res.winner_branches)
        return Sdr(self.l1_in_width, correct if correct else winners)

    def build_symbol(self, gates: LearnGates = ALL_OPEN) -> Sdr:
        x = self._l1_input()
        cw, sa = self.cfg.module_width, self.cfg.symbol_active
        parts = []
        for k, p in enumerate(self.l1):
            lo = k * cw
            fb = PredictionMultiset(cw, {i - lo: c for i, c in self.fb_l1.counts.items() if lo <= i < lo + cw})
            y = p.project(x, fb if fb.counts else None)
            if len(y) < sa:
                y = self._fill(p, x, y)
            if gates.l1_above and x.active:
                p.learn(x, y)
            parts.append(y)
        return concat(parts)

    def _fill(self, p: Projector, x: Sdr, y: Sdr) -> Sdr:
        # Not enough outputs with a connected active synapse: complete the
        # winner set by total (silent included) permanence on the active inputs.
        need = self.cfg.symbol_active - len(y)
        cols = list(x.active)
        total = p.perm[:, cols].sum(axis=1) if cols else np.zeros(p.cfg.out_width)
        order = np.lexsort((np.arange(p.cfg.out_width), -total))
        chosen = list(y.active)
        for o in order.tolist():
            if need == 0:
                break
            if o in y.bits or p.retired[o]:
                continue
            chosen.append(o)
            need -= 1
        return Sdr(p.cfg.out_width, chosen)

    def step(self, inputs: Sequence[Optional[TaggedSdr]], gates: LearnGates = ALL_OPEN,
             inject_eos: bool = False) -> ColumnOutput:
        cfg = self.cfg
        if len(inputs) != cfg.n_modules:
            raise ContractError(f"expected {cfg.n_modules} module inputs, got {len(inputs)}")
        for k, x in enumerate(inputs):
            if x is not None and x.sdr.width != cfg.input_widths[k]:
                raise ContractError(f"module {k} input width {x.sdr.width} != {cfg.input_widths[k]}")
        v = inputs[0]
        eos = False
        if v is not None:
            self.last_tag = tuple(v.tag)
            known = self.l23_state is KNOWN and not self.muted
            for sm in self.l6a:
                sm.step(v.sdr, known and gates.l6a_above)
            self._l6a_state = layer_state(self._l6a_state, self.l6a, cfg.layer_params("l6a"))
            eos = self.l6b.step(v.sdr, known and gates.l6b_above).boundary_event
            self._update_modulation()
        for k, x in enumerate(inputs):
            if x is None:
                continue
            prev, self.pending[k] = self.pending[k], x
            if prev is not None and not self.muted:
                self._l4_l23(k, prev.sdr, gates)
        if gates.prune_allowed_below and v is not None:
            for p in self.projectors():
                p.prune_segments()

        symbol = None
        if eos or inject_eos:
            if self.muted:
                self.ahead = max(0, self.ahead - 1)
            elif self.skip_real > 0:
                self.skip_real -= 1
            else:
                sdr = self.build_symbol(gates)
                symbol = TaggedSdr(sdr, self.last_tag)
                self.last_symbol = sdr
                self.feed_l5(sdr, gates.l5_below)
        return ColumnOutput(symbol, eos or inject_eos, self.l6a_prediction(),
                            self.l5_forward_prediction(), self.l6_states())

    # -- persistence ------------------------------------------------------------------
    def to_state(self) -> dict:
        def res_state(res):
            if res is None:
                return None
            return {"correct": sorted(res.correctly_predicted_branches),
                    "winners": list(res.winner_branches)}

        def tagged(x):
            return None if x is None else {"sdr": x.sdr.to_text(), "tag": list(x.tag)}

        return {
            "cfg": self.cfg.to_dict(),
            "path": self.path,
            "l4": [[p.to_state() for p in row] for row in self.l4],
            "l23": [[m.to_state() for m in row] for row in self.l23],
            "l6a": [m.to_state() for m in self.l6a],
            "l6b": self.l6b.to_state(),
            "l1": [p.to_state() for p in self.l1],
            "l5": [m.to_state() for m in self.l5],
            "pending": [tagged(x) for x in self.pending],
            "l23_last": [[res_state(r) for r in row] for row in self.l23_last],
            "l23_prev": [[res_state(r) for r in row] for row in self.l23_prev],
            "l23_state": self.l23_state.value,
            "l6a_state": self._l6a_state.value,
            "fb_l1": sorted(self.fb_l1.counts.items()),
            "fb_l4": [sorted(f.counts.items()) for f in self.fb_l4],
            "muted": self.muted,
            "ahead": self.ahead,
            "skip_real": self.skip_real,
            "last_tag": list(self.last_tag),
            "last_symbol": None if self.last_symbol is None else self.last_symbol.to_text(),
        }

    @classmethod
    def from_state(cls, st: dict) -> "CorticalColumn":
        from .sequence_memory import StepResult

        c = cls.__new__(cls)
        c.cfg = ColumnConfig.from_dict(st["cfg"])
        c.path = st["path"]
        c.l4 = [[Projector.from_state(p) for p in row] for row in st["l4"]]
        c.l23 = [[SequenceMemory.from_state(m) for m in row] for row in st["l23"]]
        c.l6a = [SequenceMemory.from_state(m) for m in st["l6a"]]
        c.l6b = SequenceMemory.from_state(st["l6b"])
        c.l1 = [Projector.from_state(p) for p in st["l1"]]
        c.l5 = [SequenceMemory.from_state(m) for m in st["l5"]]
        c.l1_in_width = c.cfg.n_modules * c.cfg.replicas_l23_l4 * c.cfg.module_width * c.cfg.branches_per_cell

        def res_from(d):
            if d is None:
                return None
            return StepResult(PredictionMultiset(c.cfg.module_width), frozenset(d["correct"]), 0.0,
                              False, tuple(d["winners"]))

        def tagged(d):
            return None if d is None else TaggedSdr(Sdr.from_text(d["sdr"]), tuple(d["tag"]))

        c.pending = [tagged(x) for x in st["pending"]]
        c.l23_last = [[res_from(r) for r in row] for row in st["l23_last"]]
        c.l23_prev = [[res_from(r) for r in row] for row in st["l23_prev"]]
        c.l23_state = KnowledgeState(st["l23_state"])
        c._l6a_state = KnowledgeState(st["l6a_state"])
        c.fb_l1 = PredictionMultiset(c.cfg.symbol_width, dict(st["fb_l1"]))
        c.fb_l4 = [PredictionMultiset(w, dict(f)) for w, f in zip(c.cfg.input_widths, st["fb_l4"])]
        c.muted = st["muted"]
        c.ahead = st["ahead"]
        c.skip_real = st["skip_real"]
        c.last_tag = tuple(st["last_tag"])
        c.last_symbol = None if st["last_symbol"] is None else Sdr.from_text(st["last_symbol"])
        c.modulation_m = 0.0
        c._update_modulation()
        return c
