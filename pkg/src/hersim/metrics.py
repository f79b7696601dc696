"""Measurements: Perfect EOS, stability, encodings and drift, power, exports."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sdr_core import ContractError
from .sequence_memory import KNOWN


class EosLedger:
    """Append-only record of EOS events per column: (cycle, tag, speculative)."""

    def __init__(self, entries: Mapping | None = None, period: int | None = None):
        self.entries: dict = {k: list(v) for k, v in (entries or {}).items()}
        self.period = period

    def record(self, column, cycle: int, tag, speculative: bool = False) -> None:
        rows = self.entries.setdefault(column, [])
        if rows and cycle < rows[-1][0]:
            raise ContractError("ledger is append-only in cycle order")
        rows.append((int(cycle), tuple(tag), bool(speculative)))

    def columns(self):
        return sorted(self.entries)

    def restrict(self, columns: Iterable) -> "EosLedger":
        keep = set(columns)
        return EosLedger({k: v for k, v in self.entries.items() if k in keep}, self.period)

    def window(self, start: int, stop: int) -> "EosLedger":
        return EosLedger({k: [e for e in v if start <= e[0] < stop] for k, v in self.entries.items()},
                         self.period)

    def count(self, real_only: bool = True) -> int:
        return sum(1 for v in self.entries.values() for e in v if not (real_only and e[2]))


def period_windows(start: int, period: int, n: int) -> list[tuple[int, int]]:
    return [(start + i * period, start + (i + 1) * period) for i in range(n)]


def perfect_eos_ratio(ledger: EosLedger | Mapping, periods: Sequence[tuple[int, int]]) -> float:
    """Share of tags whose per-period EOS counts agree, averaged over columns.

    ``periods`` are half-open cycle ranges. Consecutive periods are compared
    pairwise; speculative entries are ignored. Columns without any EOS in the
    compared periods do not contribute; a ledger with none at all scores 1.
    """
    if len(periods) < 2:
        raise ContractError("perfect_eos_ratio needs at least two periods")
    entries = ledger.entries if isinstance(ledger, EosLedger) else ledger
    ratios = []
    for col in sorted(entries):
        per = []
        for lo, hi in periods:
            per.append(Counter(tag for (cy, tag, spec) in entries[col] if lo <= cy < hi and not spec))
        tags = set().union(*per)
        if not tags:
            continue
        perfect = sum(1 for t in tags if all(per[i][t] == per[i + 1][t] for i in range(len(per) - 1)))
        ratios.append(perfect / len(tags))
    return float(np.mean(ratios)) if ratios else 1.0


def eos_rate(ledger: EosLedger | Mapping, columns: Sequence, start: int, stop: int) -> float:
    """Mean real EOS events per cycle per column over ``[start, stop)``."""
    entries = ledger.entries if isinstance(ledger, EosLedger) else ledger
    if not columns or stop <= start:
        return 0.0
    n = sum(1 for c in columns for (cy, _, spec) in entries.get(c, []) if start <= cy < stop and not spec)
    return n / (len(columns) * (stop - start))


def eos_pattern(ledger: EosLedger | Mapping, start: int, stop: int) -> list[tuple]:
    """Sorted (column, cycle - start, tag) triples; comparable across periods."""
    entries = ledger.entries if isinstance(ledger, EosLedger) else ledger
    return sorted((c, cy - start, tag) for c, v in entries.items() for (cy, tag, spec) in v
                  if start <= cy < stop and not spec)


# -- stability ---------------------------------------------------------------------------------------
class StabilityTracker:
    """Per column: did L6a stay Known, and were all adjacent CA3 slices idle, over a window?"""

    def __init__(self, cortex):
        self.cortex = cortex
        self.reset()

    def reset(self) -> None:
        cx = self.cortex
        self.known = {(r, c): True for r, c, _ in cx.all_columns()}
        self.free = {(r, c): True for r, c, _ in cx.all_columns()}
        self.cycles = 0

    def observe(self) -> None:
        cx, w = self.cortex, self.cortex.wiring
        for r, c, col in cx.all_columns():
            if col.l6a_state is not KNOWN:
                self.known[(r, c)] = False
            below = cx.slices[r][w.slice_below[r][c]].allocated
            above = any(cx.slices[r + 1][i].allocated for i in w.slices_above[r][c])
            if below or above:
                self.free[(r, c)] = False
        self.cycles += 1

    def report(self) -> dict:
        return {"known": stability_from_flags(self.known), "no_ca3": stability_from_flags(self.free)}


def stability_from_flags(flags: Mapping) -> dict:
    rungs: dict = {}
    for (r, _), ok in flags.items():
        rungs.setdefault(r, []).append(bool(ok))
    return {r: sum(v) / len(v) for r, v in sorted(rungs.items())}


def long_term_stability(cortex, window_cycles: int, stream) -> dict:
    """Step ``cortex`` through ``window_cycles`` items of ``stream`` and report
    per-rung fractions of columns that stayed Known (and CA3-free)."""
    tr = StabilityTracker(cortex)
    for _, x in zip(range(window_cycles), stream):
        cortex.step(x)
        tr.observe()
    return tr.report()


# -- encodings, similarity, drift ----------------------------------------------------------------------
def encoding_vector(symbol_counts: Mapping[int, float], dim: int, normalize: bool = True) -> np.ndarray:
    v = np.zeros(dim)
    for i, c in symbol_counts.items():
        v[int(i)] += c
    if normalize and v.sum() > 0:
        v = v / v.sum()
    return v


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise cosine; undefined pairs (zero vectors) are NaN."""
    n = len(vectors)
    m = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(n):
            c = cosine(vectors[i], vectors[j])
            if c is not None:
                m[i, j] = c
    return m


def matrix_similarity(a: np.ndarray, b: np.ndarray) -> float:
    mask = ~(np.isnan(a) | np.isnan(b))
    c = cosine(np.where(mask, a, 0), np.where(mask, b, 0))
    return float("nan") if c is None else c


def drift_degrees(a: np.ndarray, b: np.ndarray) -> float | None:
    c = cosine(a, b)
    return None if c is None else math.degrees(math.acos(c))


class EncodingRecorder:
    """Accumulates top-rung symbol bit counts per stream id.

    Call ``observe(report, stream_id)`` after every cortex step. In
    time_agnostic mode each emitted symbol counts once. In rate_vector mode
    the symbol each column currently holds counts on every cycle, divided by
    the cycles the stream was on, so streams without an EOS of their own
    still get an encoding.
    """

    def __init__(self, cortex, rung: int | None = None):
        self.cortex = cortex
        self.rung = cortex.cfg.n_rungs - 1 if rung is None else rung
        cols = cortex.columns[self.rung]
        self.offsets = np.cumsum([0] + [c.cfg.symbol_width for c in cols])
        self.dim = int(self.offsets[-1])
        self.counts: dict = {}
        self.held_counts: dict = {}
        self.held: dict = {}
        self.cycles: Counter = Counter()

    def observe(self, report, stream_id) -> None:
        self.cycles[stream_id] += 1
        acc = self.counts.setdefault(stream_id, Counter())
        for (r, c), sym in report.symbols.items():
            if r != self.rung:
                continue
            base = int(self.offsets[c])
            bits = [base + i for i in sym.sdr.active]
            acc.update(bits)
            self.held[c] = bits
        held = self.held_counts.setdefault(stream_id, Counter())
        for bits in self.held.values():
            held.update(bits)

    def vectors(self, stream_ids: Sequence, mode: str = "time_agnostic") -> list[np.ndarray]:
        if mode not in ("time_agnostic", "rate_vector"):
            raise ContractError("mode must be time_agnostic or rate_vector")
        out = []
        for sid in stream_ids:
            if mode == "time_agnostic":
                v = encoding_vector(self.counts.get(sid, {}), self.dim, normalize=False)
            else:
                v = encoding_vector(self.held_counts.get(sid, {}), self.dim, normalize=False)
                if self.cycles[sid]:
                    v = v / self.cycles[sid]
            out.append(v)
        return out


def encoding_and_similarity(recorder: EncodingRecorder, stream_ids: Sequence,
                            mode: str = "time_agnostic") -> np.ndarray:
    return similarity_matrix(recorder.vectors(stream_ids, mode))


# -- power --------------------------------------------------------------------------------------------
def power_estimate(p0: float, n: int, a: float) -> float:
    """P_t = p0 * n * sum_{i<n} a^i (rung i runs at a^i of the first rung's rate)."""
    if not 0 < a < 1:
        raise ContractError("reduction factor must lie in (0, 1)")
    if n < 1:
        raise ContractError("need at least one column per side")
    return p0 * n * (1 - a ** n) / (1 - a)


# -- forwarding --------------------------------------------------------------------------------------
def forwarding_ratio(cortex) -> float:
    """Speculative share of all symbols delivered into the top rung."""
    top = cortex.cfg.n_rungs - 1
    tot = spec = 0
    for (r, _), (n, s) in cortex.delivered.items():
        if r == top:
            tot += n
            spec += s
    return spec / tot if tot else 0.0


# -- exports -------------------------------------------------------------------------------------------
def export_eos_ledger(ledger: EosLedger | Mapping, path: str | Path) -> None:
    entries = ledger.entries if isinstance(ledger, EosLedger) else ledger
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rung", "column", "cycle", "stream_id", "offset", "speculative"])
        for (r, c) in sorted(entries):
            for cy, tag, spec in entries[(r, c)]:
                w.writerow([r, c, cy, tag[0], tag[1], int(spec)])


def export_synaptic_load(rows: Sequence[tuple], path: str | Path) -> None:
    """rows: (cycle, rung, layer, load)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cycle", "rung", "layer", "load"])
        w.writerows(rows)


def export_stability(report: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rung", "known", "no_ca3"])
        for r in sorted(report["known"]):
            w.writerow([r, report["known"][r], report["no_ca3"][r]])


def export_similarity(matrix: np.ndarray, labels: Sequence, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, matrix):
            w.writerow([lab] + ["" if np.isnan(v) else f"{v:.6f}" for v in row])


def write_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
