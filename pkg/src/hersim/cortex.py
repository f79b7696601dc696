"""Cortex topology and the per-cycle scheduler.

Columns are arranged in rungs. Rung 0 reads the encoded input flows; every
higher rung reads the symbols emitted by the rung below, vertically from the
aligned predecessor and laterally from ``(j + offset) mod width``. CA3 filtering
slices sit on every rung boundary (including encoder -> rung 0), and one
attention-generator slice sits above each top-rung column.

A global cycle runs: MGN filter -> rung 0 -> rung 1 -> ... (a higher-rung column
only steps when one of its flows delivered a symbol) -> CA3 slices, allocation
and gates -> CTLoop pass -> feedback latching for the next cycle.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .cortical_column import ColumnConfig, CorticalColumn
from .hippocampus import FilteringSlice, LearnGates, allocate_policy, gating_rules
from .sdr_core import ContractError, PredictionMultiset, Sdr, TaggedSdr, concat, multiset_merge, rng_stream, split
from .sequence_memory import KNOWN, LAYER_DEFAULTS, UNKNOWN, HysteresisParams
from .thalamus import (
    CtloopState,
    MatchLimits,
    MgnState,
    ctloop_match,
    forwarding_eligibility,
    mgn_filter,
)

SPECULATIVE = True


@dataclass
class RungConfig:
    """Per-rung column settings; layer parameter overrides are partial dicts."""

    module_width: int = 121
    symbol_active: int = 4
    branches_per_cell: int = 4
    replicas_l23_l4: int = 2
    replicas_l6: int = 1
    replicas_l5: int = 2
    layers: dict = field(default_factory=dict)
    l4_prune_rate: float = 0.05
    l1_prune_rate: float = 0.05
    symbol_offset: int = 0


@dataclass
class CortexConfig:
    width: int = 2
    n_rungs: int = 2
    scale_out: list = field(default_factory=lambda: [1, 1])
    lateral_width: list = field(default_factory=lambda: [0, 1])
    lateral_offsets: list = field(default_factory=lambda: [1])
    rungs: list = field(default_factory=list)
    input_width: int = 121
    input_active: int = 4
    ca3_group_size: int = 2
    ca3_shift: int = 1
    ca3_replicas: int = 3
    ca3_params: dict = field(default_factory=dict)
    ca3_decay_horizon: int = 10_000
    swr_max_len: int = 10
    supervised_eos: bool = False
    attention: bool = False
    swr: bool = False
    master_seed: int = 0
    mgn_t_rep: int = 2
    mgn_prediction_filter: bool = True
    match_min_bits: Optional[int] = None
    match_max_bits: Optional[int] = None
    runaway_limit: int = 3
    # a muted column may be at most this many forwarded symbols ahead of its real input
    ctloop_max_ahead: int = 2
    l6b_learn_on_ca3_above: bool = True
    ctloop_partner: str = "l6a"

    def __post_init__(self):
        if self.n_rungs < 1 or self.width < 1:
            raise ContractError("need at least one rung and one flow")
        if len(self.scale_out) != self.n_rungs or len(self.lateral_width) != self.n_rungs:
            raise ContractError("scale_out and lateral_width need one entry per rung")
        if any(n < 1 for n in self.scale_out):
            raise ContractError("scale_out entries must be >= 1")
        if self.lateral_width[0] != 0:
            raise ContractError("the first rung has no lateral modules")
        for b in self.lateral_width:
            if b > len(self.lateral_offsets):
                raise ContractError("lateral_width exceeds the number of lateral offsets")
        for off in self.lateral_offsets:
            if off % self.width == 0 and any(self.lateral_width):
                raise ContractError("lateral offset must not map a column onto itself")
            if abs(off) >= self.width and any(self.lateral_width):
                raise ContractError("lateral offset must be smaller than the rung width")
        while len(self.rungs) < self.n_rungs:
            self.rungs.append(RungConfig(branches_per_cell=[4, 8, 16][min(len(self.rungs), 2)]))
        self.rungs = [r if isinstance(r, RungConfig) else RungConfig(**r) for r in self.rungs]
        if self.ctloop_partner not in ("l6a", "l6b"):
            raise ContractError("ctloop_partner must be 'l6a' or 'l6b'")
        if self.ca3_group_size < 1:
            raise ContractError("ca3_group_size must be >= 1")

    @property
    def multiplicity(self) -> list[int]:
        out, m = [], 1
        for n in self.scale_out:
            m *= n
            out.append(m)
        return out

    @property
    def rung_widths(self) -> list[int]:
        return [self.width * m for m in self.multiplicity]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CortexConfig":
        d = dict(d)
        d["rungs"] = [RungConfig(**r) if isinstance(r, dict) else r for r in d.get("rungs", [])]
        return cls(**d)


def _params(layer: str, overrides: dict, branches: int) -> HysteresisParams:
    return LAYER_DEFAULTS[layer].replace(branches_per_cell=branches, **overrides.get(layer, {}))


@dataclass
class Wiring:
    """Pure function of the configuration: who feeds whom."""

    vertical: list           # vertical[r][c] -> index in rung r-1 (or flow for r == 0)
    lateral: list            # lateral[r][c] -> list of source indices
    consumers: list          # consumers[r][c] -> list of (col, module) in rung r+1
    slices: list             # slices[r] -> list of (sources, covered consumer indices)
    slice_below: list        # slice_below[r][c] -> slice index at boundary r
    slices_above: list       # slices_above[r][c] -> slice indices at boundary r+1
    reachable_top: list      # reachable_top[r][c] -> top-rung column indices


def build_wiring(cfg: CortexConfig) -> Wiring:
    W, R = cfg.width, cfg.n_rungs
    mult = cfg.multiplicity
    widths = cfg.rung_widths
    vertical, lateral = [], []
    for r in range(R):
        fan = cfg.scale_out[r]
        prev_mult = mult[r - 1] if r else 1
        v_r, l_r = [], []
        for c in range(widths[r]):
            j, s = divmod(c, mult[r])
            src_rep = s // fan
            v_r.append(j * prev_mult + src_rep)
            offs = cfg.lateral_offsets[: cfg.lateral_width[r]]
            l_r.append([((j + off) % W) * prev_mult + src_rep for off in offs])
        vertical.append(v_r)
        lateral.append(l_r)
    consumers = []
    for r in range(R):
        cons = [[] for _ in range(widths[r])]
        if r + 1 < R:
            for c in range(widths[r + 1]):
                cons[vertical[r + 1][c]].append((c, 0))
                for k, src in enumerate(lateral[r + 1][c]):
                    cons[src].append((c, k + 1))
        consumers.append(cons)
    # CA3 slices: boundary r sits below rung r; sources are rung r-1 columns or flows.
    slices, slice_below = [], []
    G = cfg.ca3_group_size
    for r in range(R):
        src_width = W * (mult[r - 1] if r else 1)
        src_mult = mult[r - 1] if r else 1
        shift = (r * cfg.ca3_shift) % W
        n_groups = math.ceil(W / G)
        fan = cfg.scale_out[r]
        table, below = [], [None] * widths[r]
        for s in range(mult[r]):
            for g in range(n_groups):
                base_positions = sorted({(shift + g * G + i) % W for i in range(G)})
                sources = [j * src_mult + s // fan for j in base_positions]
                covered = [c for c in range(widths[r])
                           if c % mult[r] == s and vertical[r][c] in sources]
                if not covered:
                    continue
                idx = len(table)
                table.append((sources, covered))
                for c in covered:
                    below[c] = idx
        assert all(b is not None for b in below) and src_width > 0
        slices.append(table)
        slice_below.append(below)
    # attention generators above the top rung, one per top column
    slices.append([([c], [c]) for c in range(widths[-1])])
    slices_above = []
    for r in range(R):
        above = [[] for _ in range(widths[r])]
        for idx, (sources, _) in enumerate(slices[r + 1]):
            for c in sources:
                above[c].append(idx)
        slices_above.append(above)
    reach = [None] * R
    reach[R - 1] = [[c] for c in range(widths[-1])]
    for r in range(R - 2, -1, -1):
        reach[r] = [sorted({t for (c2, _) in consumers[r][c] for t in reach[r + 1][c2]})
                    for c in range(widths[r])]
    return Wiring(vertical, lateral, consumers, slices, slice_below, slices_above, reach)


@dataclass
class CycleReport:
    cycle: int
    eos: list = field(default_factory=list)          # (rung, col, tag, speculative)
    symbols: dict = field(default_factory=dict)      # (rung, col) -> TaggedSdr
    stepped: list = field(default_factory=list)      # (rung, col)
    forwards: list = field(default_factory=list)     # (rung, col, size)
    mutes: list = field(default_factory=list)        # (rung, col, on)
    allocation: list = field(default_factory=list)   # (boundary, slice, allocated)
    swr: list = field(default_factory=list)          # (boundary, slice, length)
    attention: list = field(default_factory=list)    # (top col, on)
    mgn_suppressed: int = 0


class Cortex:
    def __init__(self, cfg: CortexConfig, threads: int = 1):
        self.cfg = cfg
        self.wiring = build_wiring(cfg)
        self.threads = max(1, int(threads))
        self.cycle = 0
        self.columns: list[list[CorticalColumn]] = []
        widths = cfg.rung_widths
        for r in range(cfg.n_rungs):
            rc = cfg.rungs[r]
            if r == 0:
                in_w, in_a = cfg.input_width, cfg.input_active
            else:
                prev = self.columns[r - 1][0].cfg
                in_w, in_a = prev.symbol_width, prev.symbol_bits
            n_mod = 1 + cfg.lateral_width[r]
            ccfg = ColumnConfig(
                n_modules=n_mod, replicas_l23_l4=rc.replicas_l23_l4, replicas_l6=rc.replicas_l6,
                replicas_l5=rc.replicas_l5, module_width=rc.module_width, symbol_active=rc.symbol_active,
                input_widths=(in_w,) * n_mod, input_active=(in_a,) * n_mod,
                branches_per_cell=rc.branches_per_cell,
                l23=_params("l23", rc.layers, rc.branches_per_cell),
                l6a=_params("l6a", rc.layers, rc.branches_per_cell),
                l6b=_params("l6b", rc.layers, rc.branches_per_cell),
                l5=_params("l5", rc.layers, rc.branches_per_cell),
                l4_prune_rate=rc.l4_prune_rate, l1_prune_rate=rc.l1_prune_rate,
                symbol_offset=rc.symbol_offset)
            self.columns.append([CorticalColumn(ccfg, cfg.master_seed, f"r{r}/c{c}")
                                 for c in range(widths[r])])
        ca3 = LAYER_DEFAULTS["ca3"].replace(**cfg.ca3_params)
        self.slices: list[list[FilteringSlice]] = []
        for b, table in enumerate(self.wiring.slices):
            row = []
            for i, (sources, _) in enumerate(table):
                if b == 0:
                    part_w, part_a = [cfg.input_width] * len(sources), cfg.input_active
                else:
                    sc = self.columns[b - 1][0].cfg
                    part_w, part_a = [sc.symbol_width] * len(sources), sc.symbol_bits
                rngs = [rng_stream(cfg.master_seed, f"ca3/{b}/{i}/{k}") for k in range(cfg.ca3_replicas)]
                row.append(FilteringSlice(part_w, rngs, ca3.replace(branches_per_cell=4), part_a,
                                          cfg.ca3_decay_horizon, swr_max_len=cfg.swr_max_len))
            self.slices.append(row)
        self.mgn = MgnState(t_rep=cfg.mgn_t_rep)
        self.mgn.ensure(cfg.width)
        self.ctloop = [[CtloopState() for _ in row] for row in self.columns]
        self.gates: list[list[LearnGates]] = [[LearnGates() for _ in row] for row in self.columns]
        self.pending_forwards: dict = {}
        self.replay_queue: dict = {}
        self.flow_feedback: list[Optional[Sdr]] = [None] * cfg.width
        self.last_stream_id = None
        self.ledger: dict = {}
        self.delivered: dict = {}
        self.history: list[CycleReport] = []
        self.keep_history = False
        self._executor = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self._recompute_gates()

    # -- helpers ---------------------------------------------------------------
    def column(self, r: int, c: int) -> CorticalColumn:
        return self.columns[r][c]

    def all_columns(self):
        for r, row in enumerate(self.columns):
            for c, col in enumerate(row):
                yield r, c, col

    def attention_on(self, r: int, c: int) -> bool:
        if not self.cfg.attention:
            return False
        tops = self.wiring.reachable_top[r][c]
        return bool(tops) and all(not self.slices[-1][t].allocated for t in tops)

    def is_forwarding(self, r: int, c: int) -> bool:
        if r == self.cfg.n_rungs - 1:
            return self.attention_on(r, c)
        return self.columns[r][c].muted

    def synaptic_load(self) -> dict:
        out = {}
        for r, row in enumerate(self.columns):
            tot = {"l23": 0, "l6a": 0, "l6b": 0, "l5": 0}
            for col in row:
                for k, v in col.synaptic_load().items():
                    tot[k] += v
            out[r] = tot
        return out

    def rung_load(self, r: int) -> int:
        return sum(self.synaptic_load()[r].values())

    def ca3_load(self) -> int:
        return sum(s.synaptic_load() for row in self.slices for s in row)

    def _map(self, fn, jobs):
        if self._executor is None or len(jobs) < 2:
            return [fn(j) for j in jobs]
        return list(self._executor.map(fn, jobs))

    # -- gates -------------------------------------------------------------------------
    def _recompute_gates(self) -> None:
        cfg, w = self.cfg, self.wiring
        R = cfg.n_rungs
        for r, row in enumerate(self.columns):
            for c, col in enumerate(row):
                below = self.slices[r][w.slice_below[r][c]]
                g = gating_rules(below.allocated, below.state, col.l23_state)
                aboves = [self.slices[r + 1][i] for i in w.slices_above[r][c]]
                # L5 only serves the corticothalamic loop; without it the layer stays silent
                l5 = cfg.attention
                for i, s in zip(w.slices_above[r][c], aboves):
                    covered = w.slices[r + 1][i][1]
                    succ_rung = r + 1 if r + 1 < R else r
                    states = [self.columns[succ_rung][k].l23_state for k in covered]
                    l23_up = KNOWN if all(st is KNOWN for st in states) else UNKNOWN
                    l5 = l5 and gating_rules(s.allocated, s.state, l23_up).l5_below
                prune = all(not s.allocated for s in aboves)
                l6b = g.l6b_above
                if cfg.l6b_learn_on_ca3_above and any(s.allocated for s in aboves):
                    if not (below.allocated and below.state is not KNOWN):
                        l6b = True
                l6a = g.l6a_above
                # re-attachment transient after speculative forwarding: no L6 learning
                if col.muted or col.skip_real or self._source_transient(r, c):
                    l6a = l6b = False
                self.gates[r][c] = LearnGates(g.l1_above, g.l23_above, g.l4_above, l6a, l6b, l5, prune)

    def _source_transient(self, r: int, c: int) -> bool:
        if r == 0:
            return False
        src = self.columns[r - 1][self.wiring.vertical[r][c]]
        return src.muted or src.skip_real > 0

    # -- main step -----------------------------------------------------------------------
    def step(self, encoded_inputs: Sequence[Optional[TaggedSdr]]) -> CycleReport:
        cfg, w = self.cfg, self.wiring
        if len(encoded_inputs) != cfg.width:
            raise ContractError(f"expected {cfg.width} input flows, got {len(encoded_inputs)}")
        rep = CycleReport(self.cycle)
        # 1. MGN
        suppressed_before = self.mgn.suppressed_count
        flows = []
        for f, x in enumerate(encoded_inputs):
            ca3_present = self.slices[0][w.slice_below[0][self._first_consumer(f)]].allocated
            pred = self.flow_feedback[f] if cfg.mgn_prediction_filter else None
            flows.append(mgn_filter(self.mgn, f, x, pred, ca3_present))
        rep.mgn_suppressed = self.mgn.suppressed_count - suppressed_before
        # 2. supervised EOS on stream change
        inject = self._supervised_injections(encoded_inputs)
        # 3. rungs, bottom-up
        published: list[list[Optional[TaggedSdr]]] = []
        spec_flags: list[list[bool]] = []
        for r in range(cfg.n_rungs):
            row = self.columns[r]
            jobs = []
            for c, col in enumerate(row):
                if r == 0:
                    inputs = [flows[w.vertical[0][c]]]
                    spec = [False]
                else:
                    srcs = [w.vertical[r][c]] + list(w.lateral[r][c])
                    inputs = [published[r - 1][s] for s in srcs]
                    spec = [spec_flags[r - 1][s] for s in srcs]
                replay = self._pop_replay(r, c)
                if any(x is not None for x in inputs) or inject[r][c] or replay:
                    jobs.append((r, c, inputs, inject[r][c], replay, spec))
            results = self._map(self._step_column, jobs)
            pub = [None] * len(row)
            flags = [False] * len(row)
            for (r_, c, inputs, inj, replay, spec), out in zip(jobs, results):
                rep.stepped.append((r, c))
                self.delivered.setdefault((r, c), [0, 0])
                if inputs[0] is not None:
                    self.delivered[(r, c)][0] += 1
                    if spec[0]:
                        self.delivered[(r, c)][1] += 1
                if out is not None and out.symbol is not None:
                    pub[c] = out.symbol
                    rep.symbols[(r, c)] = out.symbol
                    rep.eos.append((r, c, out.symbol.tag, False))
                    self.ledger.setdefault((r, c), []).append((self.cycle, tuple(out.symbol.tag), False))
            # speculative forwards decided last cycle replace the (muted) real output
            for c in range(len(row)):
                fwd = self.pending_forwards.pop((r, c), None)
                if fwd is not None:
                    pub[c] = fwd
                    flags[c] = True
                    rep.symbols[(r, c)] = fwd
                    rep.eos.append((r, c, fwd.tag, True))
                    self.ledger.setdefault((r, c), []).append((self.cycle, tuple(fwd.tag), True))
            published.append(pub)
            spec_flags.append(flags)
        # 4. CA3 slices, allocation, replay
        self._step_slices(flows, published, rep)
        # L5 modulation comes from the next rung's L6a
        for r in range(cfg.n_rungs - 1):
            for c, col in enumerate(self.columns[r]):
                ms = [self.columns[r + 1][k].modulation_m for (k, mod) in w.consumers[r][c] if mod == 0]
                if ms:
                    col.set_l5_modulation(max(ms))
        self._recompute_gates()
        # 5. CTLoop (with attention off nothing is eligible, so muted columns resume)
        self._ctloop(rep)
        # 6. feedback for next cycle
        self._route_feedback(rep)
        self.cycle += 1
        if self.keep_history:
            self.history.append(rep)
        return rep

    def _first_consumer(self, flow: int) -> int:
        return next(c for c, v in enumerate(self.wiring.vertical[0]) if v == flow)

    def _step_column(self, job):
        r, c, inputs, inject, replay, _ = job
        col = self.columns[r][c]
        gates = self.gates[r][c]
        for module, item in replay:
            col.replay_l4(module, item, gates)
        if any(x is not None for x in inputs) or inject:
            return col.step(inputs, gates, inject_eos=inject)
        return None

    def _supervised_injections(self, encoded_inputs):
        cfg = self.cfg
        inject = [[False] * len(row) for row in self.columns]
        if not cfg.supervised_eos:
            return inject
        ids = [x.tag[0] for x in encoded_inputs if x is not None]
        if not ids:
            return inject
        sid = ids[0]
        changed = self.last_stream_id is not None and sid != self.last_stream_id
        self.last_stream_id = sid
        if changed:
            inject_supervised_eos(self, inject)
        return inject

    def _pop_replay(self, r: int, c: int):
        items = []
        for module in range(self.columns[r][c].cfg.n_modules):
            q = self.replay_queue.get((r, c, module))
            if q:
                items.append((module, q.pop(0)))
                if not q:
                    del self.replay_queue[(r, c, module)]
        return items

    def _step_slices(self, flows, published, rep: CycleReport) -> None:
        cfg, w = self.cfg, self.wiring
        R = cfg.n_rungs
        for b, row in enumerate(self.slices):
            for i, sl in enumerate(row):
                sources, covered = w.slices[b][i]
                if b == 0:
                    parts = [flows[s] for s in sources]
                else:
                    parts = [published[b - 1][s] for s in sources]
                if sl.allocated and any(p is not None for p in parts):
                    x = concat([p.sdr if p is not None else Sdr(pw) for p, pw in zip(parts, sl.part_widths)])
                    succ_rung = b if b < R else R - 1
                    want = (cfg.swr and b < R and b > 0
                            and any(self.columns[succ_rung][k].l6a_state is UNKNOWN for k in covered))
                    res = sl.step(x, want_swr=want)
                    if res.swr:
                        rep.swr.append((b, i, len(res.swr)))
                        self._queue_replay(b, i, res.swr)
                succ_rung = b if b < R else R - 1
                alloc = allocate_policy([self.columns[succ_rung][k].l6a_state for k in covered])
                if sl.set_allocated(alloc):
                    rep.allocation.append((b, i, alloc))
                    if b == R:
                        rep.attention.append((covered[0], not alloc))
                sl.tick()

    def _queue_replay(self, b: int, i: int, items: list[Sdr]) -> None:
        sources, _ = self.wiring.slices[b][i]
        sl = self.slices[b][i]
        # a new ripple supersedes whatever is left of the previous one
        for src in sources:
            for (c, module) in self.wiring.consumers[b - 1][src]:
                self.replay_queue.pop((b, c, module), None)
        for item in items:
            parts = split(item, sl.part_widths)
            for src, part in zip(sources, parts):
                # parts thinner than a real symbol are not worth clustering on
                if len(part) < sl.part_active:
                    continue
                for (c, module) in self.wiring.consumers[b - 1][src]:
                    self.replay_queue.setdefault((b, c, module), []).append(part)

    def _ctloop(self, rep: CycleReport) -> None:
        cfg, w = self.cfg, self.wiring
        R = cfg.n_rungs
        for r in range(R - 2, -1, -1):
            for c, col in enumerate(self.columns[r]):
                cons = w.consumers[r][c]
                eligible = forwarding_eligibility([self.is_forwarding(r + 1, k) for k, _ in cons],
                                                  self.attention_on(r, c))
                # novelty on the real input (L6b left Known) re-attaches the column
                eligible = eligible and col.l6b.state is KNOWN
                match = None
                if eligible and col.ahead + col.skip_real >= cfg.ctloop_max_ahead:
                    continue  # hold: far enough ahead, wait for the real stream
                if eligible:
                    partners = []
                    for k, mod in cons:
                        if mod != 0:
                            continue
                        succ = self.columns[r + 1][k]
                        partners.append(succ.l6a_prediction() if cfg.ctloop_partner == "l6a"
                                        else succ.l6b.predicted_next())
                    n = col.cfg.symbol_bits
                    limits = MatchLimits(cfg.match_min_bits or n, cfg.match_max_bits or n)
                    match = ctloop_match(col.l5_forward_prediction(), partners, limits)
                    if match is not None and not self.ctloop[r][c].register(match, cfg.runaway_limit):
                        match = None
                if match is not None:
                    assert limits.min_bits <= len(match) <= limits.max_bits
                    if not col.muted:
                        rep.mutes.append((r, c, True))
                    col.mute(True)
                    col.note_forwarded(match)
                    col.feed_l5(match, self.gates[r][c].l5_below)
                    self.pending_forwards[(r, c)] = TaggedSdr(match, col.last_tag)
                    rep.forwards.append((r, c, len(match)))
                else:
                    self.ctloop[r][c].clear()
                    if col.muted:
                        col.mute(False)
                        rep.mutes.append((r, c, False))

    def _route_feedback(self, rep: CycleReport) -> None:
        cfg, w = self.cfg, self.wiring
        stepped = set(rep.stepped)
        for r in range(cfg.n_rungs):
            n_src = cfg.width if r == 0 else len(self.columns[r - 1])
            touched = {w.vertical[r][c] for c in range(len(self.columns[r])) if (r, c) in stepped}
            for src in sorted(touched):
                succ = [self.columns[r][c] for c in range(len(self.columns[r])) if w.vertical[r][c] == src]
                merged = multiset_merge([s.l6a_prediction() for s in succ])
                if r == 0:
                    self.flow_feedback[src] = merged.support() if merged.counts else None
                    continue
                self.columns[r - 1][src].latch_l1_feedback(merged)
                for (c, module) in w.consumers[r - 1][src]:
                    self.columns[r][c].latch_l4_feedback(module, merged)
            assert n_src > 0

    # -- persistence -------------------------------------------------------------------
    def to_state(self) -> dict:
        def tagged(x):
            return None if x is None else {"sdr": x.sdr.to_text(), "tag": list(x.tag)}

        return {
            "cfg": self.cfg.to_dict(),
            "cycle": self.cycle,
            "columns": [[col.to_state() for col in row] for row in self.columns],
            "slices": [[s.to_state() for s in row] for row in self.slices],
            "mgn": {"t_rep": self.mgn.t_rep,
                    "last": [None if x is None else x.to_text() for x in self.mgn.last],
                    "repeats": list(self.mgn.repeats),
                    "suppressed": self.mgn.suppressed_count, "passed": self.mgn.passed_count},
            "ctloop": [[[None if s.last_forward is None else s.last_forward.to_text(), s.repeat]
                        for s in row] for row in self.ctloop],
            "pending_forwards": [[r, c, tagged(x)] for (r, c), x in sorted(self.pending_forwards.items())],
            "replay_queue": [[r, c, m, [x.to_text() for x in q]]
                             for (r, c, m), q in sorted(self.replay_queue.items())],
            "flow_feedback": [None if x is None else x.to_text() for x in self.flow_feedback],
            "last_stream_id": self.last_stream_id,
            "ledger": [[r, c, [[cy, list(tag), sp] for cy, tag, sp in v]]
                       for (r, c), v in sorted(self.ledger.items())],
            "delivered": [[r, c, n, s] for (r, c), (n, s) in sorted(self.delivered.items())],
        }

    @classmethod
    def from_state(cls, st: dict, threads: int = 1) -> "Cortex":
        cx = cls.__new__(cls)
        cx.cfg = CortexConfig.from_dict(st["cfg"])
        cx.wiring = build_wiring(cx.cfg)
        cx.threads = max(1, int(threads))
        cx.cycle = st["cycle"]
        cx.columns = [[CorticalColumn.from_state(c) for c in row] for row in st["columns"]]
        cx.slices = [[FilteringSlice.from_state(s) for s in row] for row in st["slices"]]
        m = st["mgn"]
        cx.mgn = MgnState(m["t_rep"], [None if x is None else Sdr.from_text(x) for x in m["last"]],
                          list(m["repeats"]), m["suppressed"], m["passed"])
        cx.ctloop = [[CtloopState(None if a is None else Sdr.from_text(a), n) for a, n in row]
                     for row in st["ctloop"]]
        cx.pending_forwards = {(r, c): TaggedSdr(Sdr.from_text(x["sdr"]), tuple(x["tag"]))
                               for r, c, x in st["pending_forwards"]}
        cx.replay_queue = {(r, c, m_): [Sdr.from_text(x) for x in q] for r, c, m_, q in st["replay_queue"]}
        cx.flow_feedback = [None if x is None else Sdr.from_text(x) for x in st["flow_feedback"]]
        sid = st["last_stream_id"]
        cx.last_stream_id = sid
        cx.ledger = {(r, c): [(cy, tuple(tag), sp) for cy, tag, sp in v] for r, c, v in st["ledger"]}
        cx.delivered = {(r, c): [n, s] for r, c, n, s in st["delivered"]}
        cx.history = []
        cx.keep_history = False
        cx._executor = ThreadPoolExecutor(cx.threads) if cx.threads > 1 else None
        cx.gates = [[LearnGates() for _ in row] for row in cx.columns]
        cx._recompute_gates()
        return cx

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


def build_cortex(cfg: CortexConfig, threads: int = 1) -> Cortex:
    return Cortex(cfg, threads)


def inject_supervised_eos(cortex: Cortex, inject: list) -> None:
    """Mark a forced EOS for every column whose L6b learning gate is open."""
    for r, row in enumerate(cortex.columns):
        for c, col in enumerate(row):
            g = cortex.gates[r][c]
            if g.l6b_above and col.l23_state is KNOWN:
                inject[r][c] = True


def cortex_step(cortex: Cortex, encoded_inputs) -> CycleReport:
    return cortex.step(encoded_inputs)


def route_feedback(cortex: Cortex, report: CycleReport) -> None:
    cortex._route_feedback(report)
