"""Feedback-modulated k-winners-take-all projector.

Used three ways: as the plastic input projector of a column (L4), as the
plastic symbol builder (L1), and as the fixed-weight sparsifier behind the
auditory front-end (DCN). The proximal synapse matrix is dense over a potential
pool chosen at construction; synapses that decay to zero are removed for good.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .sdr_core import ContractError, PredictionMultiset, Sdr, perm_q, rng_from_state, rng_state


@dataclass(frozen=True)
class ProjectorConfig:
    in_width: int
    out_width: int
    k_winners: int
    potential_fraction: float = 0.70
    connected_fraction_of_potential: float = 0.20
    perm_threshold: float = 0.5
    ltp_delta: float = 0.10
    ltd_delta: float = 0.01
    hetero_delta: float = 0.01
    plastic: bool = True
    prune_rate: float = 1.0
    # outputs that won within this many projections are shielded from pruning
    prune_protect: int = 10_000

    def __post_init__(self):
        if self.k_winners > self.out_width:
            raise ContractError("k_winners cannot exceed out_width")
        for f in (self.potential_fraction, self.connected_fraction_of_potential):
            if not 0.0 < f <= 1.0:
                raise ContractError("fractions must be in (0, 1]")


class Projector:
    def __init__(self, cfg: ProjectorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.thr_q = perm_q(cfg.perm_threshold)
        n_pot = int(round(cfg.potential_fraction * cfg.in_width))
        perm = np.zeros((cfg.out_width, cfg.in_width), dtype=np.int32)
        potential = np.zeros_like(perm, dtype=bool)
        for o in range(cfg.out_width):
            pool = rng.choice(cfg.in_width, size=n_pot, replace=False)
            connected = rng.random(n_pot) < cfg.connected_fraction_of_potential
            hi = rng.uniform(cfg.perm_threshold, 1.0, n_pot)
            lo = rng.uniform(0.0, cfg.perm_threshold, n_pot)
            vals = np.where(connected, hi, lo)
            q = np.rint(vals * 65535).astype(np.int32)
            # silent synapses start strictly inside (0, threshold)
            q = np.where(connected, np.maximum(q, self.thr_q), np.clip(q, 1, self.thr_q - 1))
            perm[o, pool] = q
            potential[o, pool] = True
        self.perm = perm
        self.potential = potential
        self.retired = np.zeros(cfg.out_width, dtype=bool)
        self.last_win = np.full(cfg.out_width, -1, dtype=np.int64)
        self.clock = 0
        self.feedback: PredictionMultiset | None = None

    # -- queries ----------------------------------------------------------
    def connected(self) -> np.ndarray:
        return self.potential & (self.perm >= self.thr_q)

    def scores(self, x: Sdr) -> np.ndarray:
        if x.width != self.cfg.in_width:
            raise ContractError(f"projector input width {x.width} != {self.cfg.in_width}")
        if not x.active:
            return np.zeros(self.cfg.out_width, dtype=np.int64)
        cols = self.perm[:, list(x.active)]
        return (cols >= self.thr_q).sum(axis=1)

    def expected_outputs(self, pred: PredictionMultiset) -> PredictionMultiset:
        """Map an input-space prediction multiset into output space through the
        connected synapses (how strongly each output is backed by predicted inputs)."""
        if pred.width != self.cfg.in_width:
            raise ContractError("prediction width does not match projector input")
        if not pred.counts:
            return PredictionMultiset(self.cfg.out_width)
        idx = np.fromiter(pred.counts.keys(), dtype=np.int64)
        w = np.fromiter(pred.counts.values(), dtype=np.int64)
        s = (self.perm[:, idx] >= self.thr_q).astype(np.int64) @ w
        return PredictionMultiset(self.cfg.out_width, {int(o): int(v) for o, v in enumerate(s) if v})

    # -- operations ---------------------------------------------------------
    def project(self, x: Sdr, feedback: PredictionMultiset | None = None) -> Sdr:
        primary = self.scores(x)
        if feedback is not None and feedback.width != self.cfg.out_width:
            raise ContractError("feedback width does not match projector output")
        secondary = np.zeros(self.cfg.out_width)
        if feedback is not None and feedback.counts:
            norm = 1.0 + feedback.max_count()
            for o, c in feedback.counts.items():
                secondary[o] = c / norm
        eligible = (primary > 0) & ~self.retired
        idx = np.flatnonzero(eligible)
        self.clock += 1
        if idx.size == 0:
            return Sdr(self.cfg.out_width)
        order = np.lexsort((idx, -secondary[idx], -primary[idx]))
        win = idx[order[: self.cfg.k_winners]]
        self.last_win[win] = self.clock
        return Sdr(self.cfg.out_width, win.tolist())

    def learn(self, x: Sdr, winners: Sdr) -> None:
        cfg = self.cfg
        if not cfg.plastic:
            raise ContractError("learn called on a non-plastic projector")
        if x.width != cfg.in_width or winners.width != cfg.out_width:
            raise ContractError("learn width mismatch")
        act = np.zeros(cfg.in_width, dtype=bool)
        act[list(x.active)] = True
        w = np.zeros(cfg.out_width, dtype=bool)
        w[list(winners.active)] = True
        w &= ~self.retired
        ltp, ltd, het = perm_q(cfg.ltp_delta), perm_q(cfg.ltd_delta), perm_q(cfg.hetero_delta)
        perm, pot = self.perm, self.potential
        if w.any():
            rows = perm[w]
            rows += np.where(act, ltp, -het).astype(np.int32)[None, :]
            perm[w] = rows
        if act.any():
            losers = ~w & ~self.retired
            sub = perm[np.ix_(losers, act)]
            sub -= np.where(sub >= self.thr_q, ltd, 0).astype(np.int32)
            perm[np.ix_(losers, act)] = sub
        np.clip(perm, 0, 65535, out=perm)
        dead = pot & (perm <= 0)
        pot &= ~dead
        perm[~pot] = 0

    def prune_candidates(self) -> np.ndarray:
        """Live outputs owning a silent synapse that have not won recently."""
        silent = self.potential & (self.perm < self.thr_q)
        recent = (self.last_win >= 0) & (self.clock - self.last_win < self.cfg.prune_protect)
        return np.flatnonzero(silent.any(axis=1) & ~self.retired & ~recent)

    def prune_segments(self) -> int:
        """Retire segments that still own a silent synapse and have not been used
        recently (activity shields a segment).

        Each candidate is retired with probability ``prune_rate / out_width``
        per call, so with every output a candidate about ``prune_rate`` are
        removed per step. Returns the number retired.
        """
        cand = self.prune_candidates()
        if cand.size == 0:
            return 0
        p = min(1.0, self.cfg.prune_rate / self.cfg.out_width)
        hit = cand[self.rng.random(cand.size) < p]
        self.retired[hit] = True
        return int(hit.size)

    def synapse_count(self) -> int:
        return int(self.potential.sum())

    # -- persistence ----------------------------------------------------------
    def to_state(self) -> dict:
        return {
            "cfg": asdict(self.cfg),
            "perm": self.perm.astype(np.uint16),
            "potential": self.potential.astype(np.uint8),
            "retired": self.retired.astype(np.uint8),
            "last_win": self.last_win.copy(),
            "clock": self.clock,
            "rng": rng_state(self.rng),
        }

    @classmethod
    def from_state(cls, st: dict) -> "Projector":
        p = cls.__new__(cls)
        p.cfg = ProjectorConfig(**st["cfg"])
        p.rng = rng_from_state(st["rng"])
        p.thr_q = perm_q(p.cfg.perm_threshold)
        shape = (p.cfg.out_width, p.cfg.in_width)
        p.perm = np.asarray(st["perm"]).reshape(shape).astype(np.int32)
        p.potential = np.asarray(st["potential"]).reshape(shape).astype(bool)
        p.retired = np.asarray(st["retired"]).astype(bool)
        p.last_win = np.asarray(st["last_win"]).astype(np.int64)
        p.clock = int(st["clock"])
        p.feedback = None
        return p


def init_projector(cfg: ProjectorConfig, rng: np.random.Generator) -> Projector:
    return Projector(cfg, rng)


def project(p: Projector, x: Sdr, feedback: PredictionMultiset | None = None) -> Sdr:
    return p.project(x, feedback)


def learn(p: Projector, x: Sdr, winners: Sdr) -> None:
    p.learn(x, winners)


def prune_segments(p: Projector) -> int:
    return p.prune_segments()
