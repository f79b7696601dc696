"""Novelty-gated sequence memory.

Each input bit owns a cell with a fixed number of context branches. A branch
owns distal segments whose synapses point at other branches. A branch is
predictive when one of its segments sees enough connected synapses onto the
currently active branches; a cell whose bit arrives without any predictive
branch bursts.

Plasticity is gated by a two-state hysteresis (Known / Unknown) driven by an
exponential moving average of the anomaly score. In the Known state learning is
almost switched off until novelty approaches ``up``; a Known -> Unknown flip is
reported as a boundary event, which segments the stream.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .sdr_core import (
    PERM_ONE,
    ContractError,
    PredictionMultiset,
    Sdr,
    perm_q,
    rng_from_state,
    rng_state,
)

CONNECTED_Q = perm_q(0.5)
INITIAL_Q = perm_q(0.51)


class KnowledgeState(enum.Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"


KNOWN = KnowledgeState.KNOWN
UNKNOWN = KnowledgeState.UNKNOWN


@dataclass(frozen=True)
class HysteresisParams:
    alpha: float
    up: float
    down: float
    k_steepness: float = 1000.0
    ltp_delta_base: float = 1e-5
    ltd_ratio: float = 0.1
    max_synapses_per_segment: int = 128
    branches_per_cell: int = 4

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.down < self.up < 1.0:
            raise ContractError(f"need 0 < down < up < 1, got down={self.down} up={self.up}")
        if not 0.0 <= self.ltd_ratio <= 1.0:
            raise ContractError(f"ltd_ratio must be in [0, 1], got {self.ltd_ratio}")
        if self.branches_per_cell < 1 or self.max_synapses_per_segment < 1:
            raise ContractError("branches and synapse cap must be positive")

    def replace(self, **kw) -> "HysteresisParams":
        d = asdict(self)
        d.update(kw)
        return HysteresisParams(**d)


# Per-layer operating points. L23 also accepts the slower (0.01, 0.01, 0.1)
# setting through configuration; see docs/configuration in the README.
LAYER_DEFAULTS = {
    "l23": HysteresisParams(alpha=0.1, down=0.05, up=0.4, ltd_ratio=0.1),
    "l6a": HysteresisParams(alpha=0.1, down=0.05, up=0.4, ltd_ratio=0.1),
    "l6b": HysteresisParams(alpha=0.9, down=0.1, up=0.5, ltd_ratio=0.7),
    "l5": HysteresisParams(alpha=0.5, down=0.05, up=0.5, ltd_ratio=0.5),
    "ca3": HysteresisParams(alpha=0.01, down=0.05, up=0.3, ltd_ratio=0.1, ltp_delta_base=1e-3),
}


def anomaly_score(active: Sdr, predicted_prev: Sdr) -> float:
    if active.width != predicted_prev.width:
        raise ContractError("anomaly_score width mismatch")
    if not active.active:
        return 0.0
    return 1.0 - len(active.bits & predicted_prev.bits) / len(active.active)


def ema_update(prev: float, sample: float, alpha: float) -> float:
    return alpha * sample + (1.0 - alpha) * prev


def _logistic(x: float) -> float:
    # numerically safe for |x| up to ~1e3 and beyond
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def effective_k(modulation_m: float, k_steepness: float = 1000.0) -> float:
    return (1.0 - modulation_m) * k_steepness


def ltp_delta(d0: float, modulation_m: float) -> float:
    return d0 * (1.0 + modulation_m * 100.0)


def learning_probability(state: KnowledgeState, ema_as: float, params: HysteresisParams,
                         modulation_m: float = 0.0) -> float:
    k = effective_k(modulation_m, params.k_steepness)
    centre = params.up if state is KNOWN else params.down
    return _logistic(k * (ema_as - centre))


def hysteresis_step(state: KnowledgeState, ema_as: float, params: HysteresisParams):
    """Return ``(new_state, boundary_event)``; only Known -> Unknown is a boundary."""
    if state is KNOWN and ema_as >= params.up:
        return UNKNOWN, True
    if state is UNKNOWN and ema_as <= params.down:
        return KNOWN, False
    return state, False


class StepResult(NamedTuple):
    predicted_next: PredictionMultiset
    correctly_predicted_branches: frozenset
    anomaly: float
    boundary_event: bool
    winner_branches: tuple = ()
    learned: bool = False


class SequenceMemory:
    """One sequence memory instance (an L23, L6a, L6b, L5 or CA3 replica).

    Parameters
    ----------
    width : number of input bits (one cell per bit).
    params : hysteresis and plasticity parameters.
    rng : the component's own random stream (learning draws, synapse sampling).
    activation_threshold : connected synapses a segment needs onto active
        branches to make its branch predictive.
    context_reset : whether a boundary event clears the dynamic context. CA3
        slices do not segment and run with this off.
    """

    def __init__(self, width: int, params: HysteresisParams, rng: np.random.Generator,
                 activation_threshold: int = 2, context_reset: bool = True):
        if width <= 0:
            raise ContractError("width must be positive")
        self.width = int(width)
        self.params = params
        self.rng = rng
        self.activation_threshold = int(activation_threshold)
        self.context_reset = bool(context_reset)
        self.state = UNKNOWN
        self.ema_as = 1.0
        self._m = 0.0
        self._set_deltas()
        # synapse tables
        self._syn: dict[int, dict[int, int]] = {}
        self._owner: dict[int, int] = {}
        self._branch_segs: dict[int, list[int]] = {}
        self._presyn: dict[int, set[int]] = {}
        self._next_seg = 0
        self._n_syn = 0
        # dynamic context
        self._active: frozenset = frozenset()
        self._winners: tuple = ()
        self._pred_segs: dict[int, list[int]] = {}
        self._pred_bits: frozenset = frozenset()

    # -- modulation -------------------------------------------------------
    @property
    def modulation_m(self) -> float:
        return self._m

    @modulation_m.setter
    def modulation_m(self, m: float) -> None:
        m = min(1.0, max(0.0, float(m)))
        if m != self._m:
            self._m = m
            self._set_deltas()

    def _set_deltas(self) -> None:
        # Quantize d0 first so that the m-scaling stays exact in fixed point.
        d0q = max(1, perm_q(self.params.ltp_delta_base))
        self.ltp_q = int(round(d0q * (1.0 + 100.0 * self._m)))
        self.ltd_q = int(round(self.ltp_q * self.params.ltd_ratio))

    # -- queries ----------------------------------------------------------
    @property
    def branches_per_cell(self) -> int:
        return self.params.branches_per_cell

    def synaptic_load(self) -> int:
        return self._n_syn

    def segment_count(self) -> int:
        return len(self._syn)

    def predicted_next(self) -> PredictionMultiset:
        b = self.params.branches_per_cell
        return PredictionMultiset(self.width, Counter(br // b for br in self._pred_segs))

    def predicted_support(self) -> Sdr:
        return Sdr(self.width, self._pred_bits)

    def learning_probability(self) -> float:
        return learning_probability(self.state, self.ema_as, self.params, self._m)

    def synapse_table(self) -> list[tuple[int, int, int, int]]:
        """Rows of (segment id, owner branch, presyn branch, permanence units)."""
        rows = []
        for s in sorted(self._syn):
            for pre, q in sorted(self._syn[s].items()):
                rows.append((s, self._owner[s], pre, q))
        return rows

    # -- core dynamics ------------------------------------------------------
    def _least_used(self, base: int) -> int:
        b = self.params.branches_per_cell
        return min(range(base, base + b), key=lambda br: (len(self._branch_segs.get(br, ())), br))

    def _activate(self, bits, pred_segs):
        b = self.params.branches_per_cell
        active, winners, correct, bursting = set(), [], [], []
        for bit in bits:
            base = bit * b
            hit = [br for br in range(base, base + b) if br in pred_segs]
            if hit:
                active.update(hit)
                winners.extend(hit)
                correct.extend(hit)
            else:
                active.update(range(base, base + b))
                w = self._least_used(base)
                winners.append(w)
                bursting.append(w)
        return active, winners, correct, bursting

    def _predict(self, active) -> dict[int, list[int]]:
        counts: dict[int, int] = {}
        syn, presyn = self._syn, self._presyn
        for br in active:
            for s in presyn.get(br, ()):
                if syn[s][br] >= CONNECTED_Q:
                    counts[s] = counts.get(s, 0) + 1
        thr = self.activation_threshold
        pred: dict[int, list[int]] = {}
        for s in sorted(counts):
            if counts[s] >= thr:
                pred.setdefault(self._owner[s], []).append(s)
        return pred

    def step(self, sdr: Sdr, learn_enabled: bool = True) -> StepResult:
        if sdr.width != self.width:
            raise ContractError(f"input width {sdr.width} != memory width {self.width}")
        bits = sdr.active
        prev_active, prev_winners, pred_segs = self._active, self._winners, self._pred_segs
        active, winners, correct, bursting = self._activate(bits, pred_segs)

        n = len(bits)
        hits = sum(1 for bit in bits if bit in self._pred_bits)
        anomaly = 1.0 - hits / n if n else 0.0
        self.ema_as = min(1.0, max(0.0, ema_update(self.ema_as, anomaly, self.params.alpha)))
        self.state, boundary = hysteresis_step(self.state, self.ema_as, self.params)
        reset = boundary and self.context_reset

        learned = False
        if learn_enabled and n:
            # One draw per step gates the whole step's plasticity.
            draw = self.rng.random()
            if not reset and draw < self.learning_probability():
                learned = True
                self._learn(correct, bursting, prev_active, prev_winners, pred_segs)

        if reset:
            # A boundary starts a new sequence: the offending input is taken
            # out of the old context and presented as if it had no predecessor.
            b = self.params.branches_per_cell
            active = {bit * b + k for bit in bits for k in range(b)}
        self._active = frozenset(active)
        self._winners = tuple(sorted(winners))
        self._pred_segs = self._predict(self._active)
        b = self.params.branches_per_cell
        self._pred_bits = frozenset(br // b for br in self._pred_segs)
        return StepResult(self.predicted_next(), frozenset(correct), anomaly, boundary,
                          tuple(sorted(winners)), learned)

    def reset_context(self) -> None:
        self._active = frozenset()
        self._winners = ()
        self._pred_segs = {}
        self._pred_bits = frozenset()

    # -- plasticity -------------------------------------------------------
    def _learn(self, correct, bursting, prev_active, prev_winners, pred_segs) -> None:
        for br in correct:
            for s in list(pred_segs.get(br, ())):
                if s in self._syn:
                    self._adapt(s, prev_active)
        if prev_winners:
            for w in bursting:
                self._grow(w, prev_winners)

    def _adapt(self, s: int, prev_active) -> None:
        syn = self._syn[s]
        up, down = self.ltp_q, self.ltd_q
        for pre in list(syn):
            if pre in prev_active:
                syn[pre] = min(PERM_ONE, syn[pre] + up)
            elif down:
                q = syn[pre] - down
                if q <= 0:
                    self._remove_synapse(s, pre)
                else:
                    syn[pre] = q

    def _grow(self, owner: int, candidates: Sequence[int]) -> None:
        cap = self.params.max_synapses_per_segment
        cands = list(candidates)
        if len(cands) > cap:
            cands = sorted(self.rng.choice(cands, size=cap, replace=False).tolist())
        s = self._next_seg
        self._next_seg += 1
        self._syn[s] = {pre: INITIAL_Q for pre in cands}
        self._owner[s] = owner
        self._branch_segs.setdefault(owner, []).append(s)
        for pre in cands:
            self._presyn.setdefault(pre, set()).add(s)
        self._n_syn += len(cands)

    def _remove_synapse(self, s: int, pre: int) -> None:
        del self._syn[s][pre]
        self._n_syn -= 1
        ps = self._presyn[pre]
        ps.discard(s)
        if not ps:
            del self._presyn[pre]
        if not self._syn[s]:
            self._drop_segment(s)

    def _drop_segment(self, s: int) -> None:
        for pre in self._syn.pop(s):
            ps = self._presyn[pre]
            ps.discard(s)
            if not ps:
                del self._presyn[pre]
        owner = self._owner.pop(s)
        segs = self._branch_segs[owner]
        segs.remove(s)
        if not segs:
            del self._branch_segs[owner]
        for lst in self._pred_segs.values():
            if s in lst:
                lst.remove(s)

    def decay(self, amount_q: int) -> int:
        """Subtract ``amount_q`` units from every synapse, pruning those that hit zero.

        Used to forget a deallocated CA3 slice. Returns the number of synapses removed.
        """
        removed = 0
        for s in sorted(self._syn):
            syn = self._syn.get(s)
            if syn is None:
                continue
            for pre in sorted(syn):
                q = syn[pre] - amount_q
                if q <= 0:
                    self._n_syn -= 1
                    removed += 1
                    del syn[pre]
                    ps = self._presyn[pre]
                    ps.discard(s)
                    if not ps:
                        del self._presyn[pre]
                else:
                    syn[pre] = q
            if not syn:
                self._drop_segment(s)
        if removed:
            self._pred_segs = self._predict(self._active)
            b = self.params.branches_per_cell
            self._pred_bits = frozenset(br // b for br in self._pred_segs)
        return removed

    # -- recall -------------------------------------------------------------
    def peek_chain(self, items: Sequence[Sdr]) -> list[Sdr]:
        """Predictions obtained by feeding ``items`` from the current context, without
        touching any state."""
        pred = self._pred_segs
        b = self.params.branches_per_cell
        out = []
        for x in items:
            active, *_ = self._activate(x.active, pred)
            pred = self._predict(active)
            out.append(Sdr(self.width, {br // b for br in pred}))
        return out

    # -- persistence ----------------------------------------------------------
    def to_state(self) -> dict:
        rows = self.synapse_table()
        arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
        return {
            "width": self.width,
            "params": asdict(self.params),
            "activation_threshold": self.activation_threshold,
            "context_reset": self.context_reset,
            "state": self.state.value,
            "ema_as": self.ema_as,
            "m": self._m,
            "next_seg": self._next_seg,
            "active": sorted(self._active),
            "winners": list(self._winners),
            "rng": rng_state(self.rng),
            "seg_ids": arr[:, 0].astype(np.uint32),
            "seg_owner": arr[:, 1].astype(np.uint32),
            "syn_presyn": arr[:, 2].astype(np.uint32),
            "syn_perm": arr[:, 3].astype(np.uint16),
        }

    @classmethod
    def from_state(cls, st: dict) -> "SequenceMemory":
        sm = cls(st["width"], HysteresisParams(**st["params"]), rng_from_state(st["rng"]),
                 st["activation_threshold"], st["context_reset"])
        sm.state = KnowledgeState(st["state"])
        sm.ema_as = float(st["ema_as"])
        sm._m = float(st["m"])
        sm._set_deltas()
        sm._next_seg = int(st["next_seg"])
        for s, owner, pre, q in zip(st["seg_ids"].tolist(), st["seg_owner"].tolist(),
                                    st["syn_presyn"].tolist(), st["syn_perm"].tolist()):
            if s not in sm._syn:
                sm._syn[s] = {}
                sm._owner[s] = owner
                sm._branch_segs.setdefault(owner, []).append(s)
            sm._syn[s][pre] = q
            sm._presyn.setdefault(pre, set()).add(s)
            sm._n_syn += 1
        sm._active = frozenset(st["active"])
        sm._winners = tuple(st["winners"])
        sm._pred_segs = sm._predict(sm._active)
        b = sm.params.branches_per_cell
        sm._pred_bits = frozenset(br // b for br in sm._pred_segs)
        return sm


def vote(supports: Sequence[Sdr], threshold: int) -> Sdr:
    """Keep the bits predicted by at least ``threshold`` of ``supports``."""
    c = Counter()
    for s in supports:
        c.update(s.active)
    return Sdr(supports[0].width, [i for i, k in c.items() if k >= threshold])


def recall_burst(memories: SequenceMemory | Sequence[SequenceMemory], seed_input: Sdr,
                 agreement_threshold: int | None = None, max_len: int = 10,
                 min_bits: int = 1, max_bits: int | None = None,
                 present_seed: bool = True) -> list[Sdr]:
    """Drive memories with their own (voted) predictions, learning off.

    With ``present_seed`` the seed is first fed as an input from the current
    context; without it, the memories are assumed to have just stepped on the
    seed and recall starts from their current prediction. Recall stops when the
    prediction repeats its input, falls below ``min_bits``, exceeds ``max_bits``
    or after ``max_len`` items. No memory state is modified.
    """
    if isinstance(memories, SequenceMemory):
        memories = [memories]
    memories = list(memories)
    if agreement_threshold is None:
        agreement_threshold = len(memories) // 2 + 1
    width = memories[0].width
    b = [m.params.branches_per_cell for m in memories]
    preds = [m._pred_segs for m in memories]
    current = seed_input
    if present_seed:
        preds = [m._predict(m._activate(seed_input.active, p)[0]) for m, p in zip(memories, preds)]
    out: list[Sdr] = []
    while len(out) < max_len:
        supports = [Sdr(width, {br // bb for br in p}) for p, bb in zip(preds, b)]
        nxt = vote(supports, agreement_threshold)
        if nxt == current or len(nxt) < max(1, min_bits):
            break
        if max_bits is not None and len(nxt) > max_bits:
            break
        out.append(nxt)
        preds = [m._predict(m._activate(nxt.active, p)[0]) for m, p in zip(memories, preds)]
        current = nxt
    return out
