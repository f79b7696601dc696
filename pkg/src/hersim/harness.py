"""Configuration files, checkpoints, run loop and the command line.

Checkpoint layout (all integers little-endian)::

    magic "HERCKPT\\0" | u32 format version | u64 manifest length | manifest (UTF-8 JSON)
    | u32 array count | per array: u64 byte length + raw bytes | u32 CRC32 of everything before

The manifest is the full cortex state tree with every numpy array replaced by a
``{"__nd__": index, "dtype": ..., "shape": ...}`` reference, so synapse tables are
stored as raw fixed-point bytes and a save -> load -> save round trip is
byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import struct
import sys
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import yaml

from .cortex import Cortex, CortexConfig, RungConfig
from .metrics import (
    StabilityTracker,
    eos_rate,
    export_eos_ledger,
    export_stability,
    export_synaptic_load,
    forwarding_ratio,
    perfect_eos_ratio,
    period_windows,
    write_summary,
)
from .periphery import AuditoryFrontEnd, StreamSpec, multi_flow_stream, period_length, read_feature_file
from .sdr_core import ContractError, Sdr, TaggedSdr
from .sequence_memory import KNOWN

log = logging.getLogger("hersim")

MAGIC = b"HERCKPT\0"
FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_CHECKPOINT = 5
EXIT_STOP_NOT_MET = 6


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------------
@dataclass
class StopRule:
    perfect_eos: Optional[float] = None
    windows: int = 3
    stability_window: Optional[int] = None
    max_cycles: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "StopRule":
        """``perfect_eos>=0.95``, ``cycles=N`` or ``stability=N``, comma separated."""
        rule = cls()
        for part in filter(None, (p.strip() for p in text.split(","))):
            if part.startswith("perfect_eos>="):
                rule.perfect_eos = float(part.split(">=", 1)[1])
            elif part.startswith("cycles="):
                rule.max_cycles = int(part.split("=", 1)[1])
            elif part.startswith("stability="):
                rule.stability_window = int(part.split("=", 1)[1])
            else:
                raise ConfigError(f"unknown stop rule {part!r}")
        return rule


@dataclass
class ExperimentSpec:
    cortex: CortexConfig
    synthetic: Optional[StreamSpec] = None
    input_path: Optional[str] = None
    frontend: dict = field(default_factory=dict)
    stop: StopRule = field(default_factory=StopRule)
    period: Optional[int] = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.input_path is None):
            raise ConfigError("exactly one input source (synthetic or input file) is required")


def _build(cls, d, where):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ContractError, ValueError) as e:
        raise ConfigError(f"invalid {where!r}: {e}") from e


def cortex_config_from_dict(d: dict) -> CortexConfig:
    d = dict(d or {})
    rungs = d.pop("rungs", [])
    if not isinstance(rungs, list):
        raise ConfigError("cortex.rungs must be a list")
    d["rungs"] = [_build(RungConfig, r, f"cortex.rungs[{i}]") for i, r in enumerate(rungs)]
    return _build(CortexConfig, d, "cortex")


def experiment_from_dict(d: dict, input_path: Optional[str] = None, seed: Optional[int] = None) -> ExperimentSpec:
    if not isinstance(d, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = set(d) - {"cortex", "input", "stop", "frontend"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cx = dict(d.get("cortex") or {})
    if seed is not None:
        cx["master_seed"] = int(seed)
    cortex = cortex_config_from_dict(cx)
    inp = d.get("input") or {}
    if not isinstance(inp, dict):
        raise ConfigError("input must be a mapping")
    synthetic = None
    if input_path is None:
        if "synthetic" in inp:
            synthetic = _build(StreamSpec, inp["synthetic"], "input.synthetic")
            if synthetic.n_flows != cortex.width:
                raise ConfigError("input.synthetic.n_flows must equal cortex.width")
        elif "file" in inp:
            input_path = str(inp["file"])
    stop = _build(StopRule, d.get("stop"), "stop")
    period = inp.get("period")
    if synthetic is not None:
        period = period_length(synthetic)
    return ExperimentSpec(cortex, synthetic, input_path, dict(d.get("frontend") or {}), stop, period)


def load_experiment(path: str | Path, input_path=None, seed=None) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML: {e}") from e
    return experiment_from_dict(raw, input_path, seed)


def config_fingerprint(cfg: CortexConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# -- checkpoint ---------------------------------------------------------------------------------
def _strip_arrays(obj, arrays: list):
    if isinstance(obj, np.ndarray):
        arrays.append(np.ascontiguousarray(obj))
        return {"__nd__": len(arrays) - 1, "dtype": obj.dtype.str, "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {str(k): _strip_arrays(v, arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strip_arrays(v, arrays) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _restore_arrays(obj, arrays: list):
    if isinstance(obj, dict):
        if "__nd__" in obj and set(obj) == {"__nd__", "dtype", "shape"}:
            return arrays[obj["__nd__"]]
        return {k: _restore_arrays(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_arrays(v, arrays) for v in obj]
    return obj


def checkpoint_bytes(cortex: Cortex, meta: Optional[dict] = None) -> bytes:
    arrays: list = []
    tree = _strip_arrays(cortex.to_state(), arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_fingerprint": config_fingerprint(cortex.cfg),
        "meta": meta or {},
        "state": tree,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(mbytes)), mbytes, struct.pack("<I", len(arrays))]
    for a in arrays:
        raw = a.tobytes()
        parts += [struct.pack("<Q", len(raw)), raw]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(cortex: Cortex, path: str | Path, meta: Optional[dict] = None) -> int:
    data = checkpoint_bytes(cortex, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def parse_checkpoint(data: bytes) -> tuple[dict, list]:
    if len(data) < len(MAGIC) + 16 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupted (checksum mismatch)")
    pos = len(MAGIC)
    version, mlen = struct.unpack_from("<IQ", body, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    pos += 12
    manifest = json.loads(body[pos:pos + mlen])
    pos += mlen
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    blobs = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        blobs.append(body[pos:pos + ln])
        pos += ln
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return manifest, blobs


def _arrays_from(manifest: dict, blobs: list) -> list:
    refs: dict = {}

    def walk(o):
        if isinstance(o, dict):
            if "__nd__" in o:
                refs[o["__nd__"]] = o
            else:
                for v in o.values():
                    walk(v)
        elif isinstance(o, list):
            for v in o:
                walk(v)

    walk(manifest["state"])
    out = []
    for i, blob in enumerate(blobs):
        ref = refs[i]
        out.append(np.frombuffer(blob, dtype=np.dtype(ref["dtype"])).reshape(ref["shape"]).copy())
    return out


def load_checkpoint(path: str | Path, expected: Optional[CortexConfig] = None,
                    threads: int = 1) -> tuple[Cortex, dict]:
    data = Path(path).read_bytes()
    manifest, blobs = parse_checkpoint(data)
    if expected is not None and manifest["config_fingerprint"] != config_fingerprint(expected):
        raise CheckpointError("checkpoint was written with a different configuration")
    state = _restore_arrays(manifest["state"], _arrays_from(manifest, blobs))
    try:
        cortex = Cortex.from_state(state, threads)
    except (KeyError, TypeError, ContractError) as e:
        raise CheckpointError(f"checkpoint state is incomplete: {e}") from e
    return cortex, manifest["meta"]


def checkpoint_roundtrip(cortex: Cortex) -> bool:
    a = checkpoint_bytes(cortex)
    manifest, blobs = parse_checkpoint(a)
    state = _restore_arrays(manifest["state"], _arrays_from(manifest, blobs))
    return checkpoint_bytes(Cortex.from_state(state)) == a


# -- input streams ----------------------------------------------------------------------------------
STREAM_HEADER = "# hersim-stream flows="


def write_stream_file(items, n_flows: int, path: str | Path) -> int:
    n = 0
    with open(path, "w") as f:
        f.write(f"{STREAM_HEADER}{n_flows}\n")
        for step in items:
            tag = next((x.tag for x in step if x is not None), (0, 0))
            cols = ["-" if x is None else x.sdr.to_text() for x in step]
            f.write(f"{tag[0]} {tag[1]} " + " ".join(cols) + "\n")
            n += 1
    return n


def read_stream_file(path: str | Path) -> Iterator[list]:
    with open(path) as f:
        head = f.readline().strip()
        if not head.startswith(STREAM_HEADER):
            raise ContractError("not a stream file")
        n = int(head[len(STREAM_HEADER):])
        for ln in f:
            if not ln.strip():
                continue
            sid, off, *cols = ln.split()
            if len(cols) != n:
                raise ContractError("stream line has the wrong number of flows")
            tag = (int(sid), int(off))
            yield [None if c == "-" else TaggedSdr(Sdr.from_text(c), tag) for c in cols]


def feature_stream(path: str | Path, n_flows: int, master_seed: int, frontend: dict) -> Iterator[list]:
    energies = read_feature_file(path)
    fe = AuditoryFrontEnd(energies.shape[1], n_flows, master_seed, **frontend)
    for i, row in enumerate(energies):
        yield fe.encode(row.tolist(), (0, i))


def open_input(spec: ExperimentSpec) -> Iterator[list]:
    if spec.synthetic is not None:
        return multi_flow_stream(spec.synthetic)
    path = Path(spec.input_path)
    with open(path) as f:
        head = f.readline()
    if head.startswith(STREAM_HEADER):
        return read_stream_file(path)
    return feature_stream(path, spec.cortex.width, spec.cortex.master_seed, spec.frontend)


# -- run loop -------------------------------------------------------------------------------------------
def perfect_eos_by_rung(cortex: Cortex, period: int, windows: int = 3) -> dict:
    """Per-rung Perfect EOS over the last ``windows`` periods (None before enough cycles
    or when the rung emitted nothing)."""
    out = {}
    start = cortex.cycle - windows * period
    for r in range(cortex.cfg.n_rungs):
        led = {k: v for k, v in cortex.ledger.items() if k[0] == r}
        if start < 0 or not any(start <= e[0] for v in led.values() for e in v if not e[2]):
            out[r] = None
        else:
            out[r] = perfect_eos_ratio(led, period_windows(start, period, windows))
    return out


def snapshot_stability(cortex: Cortex) -> dict:
    tr = StabilityTracker(cortex)
    tr.observe()
    return tr.report()


def run_summary(cortex: Cortex, period: Optional[int], windows: int = 3) -> dict:
    loads = cortex.synaptic_load()
    summary = {
        "cycles": cortex.cycle,
        "synaptic_load": {str(r): v for r, v in loads.items()},
        "ca3_load": cortex.ca3_load(),
        "stability": {k: {str(r): v for r, v in d.items()} for k, d in snapshot_stability(cortex).items()},
        "forwarding_ratio": forwarding_ratio(cortex),
    }
    if period:
        pe = perfect_eos_by_rung(cortex, period, windows)
        summary["perfect_eos"] = {str(r): v for r, v in pe.items()}
        summary["eos_rate"] = {
            str(r): eos_rate(cortex.ledger, [(r, c) for c in range(len(cortex.columns[r]))],
                             max(0, cortex.cycle - period), cortex.cycle)
            for r in range(cortex.cfg.n_rungs)}
    return summary


def stop_reached(cortex: Cortex, rule: StopRule, period: Optional[int], tracker: Optional[StabilityTracker]) -> bool:
    if rule.perfect_eos is not None and period and cortex.cycle % period == 0:
        pe = perfect_eos_by_rung(cortex, period, rule.windows)
        if all(v is not None and v >= rule.perfect_eos for v in pe.values()):
            return True
    if rule.stability_window and tracker is not None and tracker.cycles >= rule.stability_window:
        rep = tracker.report()["known"]
        if all(v == 1.0 for v in rep.values()):
            return True
        tracker.reset()
    return False


def run_experiment(cortex: Cortex, stream, rule: StopRule, period: Optional[int],
                   trace_level: int = 1, events=None, load_rows: Optional[list] = None) -> str:
    """Step until the stop rule fires, the cycle budget is spent or input ends.

    Returns ``"stop"``, ``"max_cycles"`` or ``"input_end"``.
    """
    tracker = StabilityTracker(cortex) if rule.stability_window else None
    budget = rule.max_cycles
    done = 0
    if budget is not None and budget <= 0:
        return "max_cycles"
    for x in stream:
        rep = cortex.step(x)
        done += 1
        if tracker is not None:
            tracker.observe()
        if events is not None and trace_level >= 2:
            events.write(json.dumps({
                "cycle": rep.cycle, "eos": [[r, c, list(t), s] for r, c, t, s in rep.eos],
                "allocation": rep.allocation, "swr": rep.swr, "mutes": rep.mutes,
                "forwards": rep.forwards}, separators=(",", ":")) + "\n")
        if load_rows is not None and period and cortex.cycle % period == 0:
            for r, layers in cortex.synaptic_load().items():
                for layer, v in layers.items():
                    load_rows.append((cortex.cycle, r, layer, v))
        if stop_reached(cortex, rule, period, tracker):
            return "stop"
        if budget is not None and done >= budget:
            return "max_cycles"
    return "input_end"


# -- desk-scale recipes ------------------------------------------------------------------------------------
BENCHMARK_SENTENCES = [[0, 1, 2, 3, 4, 5], [6, 7, 2, 3, 1, 0], [4, 5, 6, 7, 0, 2], [3, 1, 7, 6, 5, 4]]

# Four three-symbol words; set A visits every ordered word pair once (cyclically)
# and set B recombines the same words, so only the word order is new.
WORDS = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]
WORD_SET_A = [[0, 1, 2], [3, 0, 2], [1, 3, 2], [0, 3, 1]]
WORD_SET_B = [[0, 1, 3], [0, 2, 1], [0, 3, 2], [3, 1, 2]]


def benchmark_spec(repeats: int = 400, seed: int = 1) -> StreamSpec:
    """Four six-symbol sentences over eight symbols, two flows, second flow rotated by one."""
    return StreamSpec(sentences=BENCHMARK_SENTENCES, alphabet_size=8, n_flows=2,
                      repeats=repeats, seed=seed, flow_shift=1)


def word_spec(word_sentences, repeats: int = 300, seed: int = 0) -> StreamSpec:
    sents = [[s for w in ws for s in WORDS[w]] for ws in word_sentences]
    return StreamSpec(sentences=sents, alphabet_size=sum(len(w) for w in WORDS), n_flows=2,
                      repeats=repeats, seed=seed)


def ca3_free(cortex: Cortex) -> bool:
    return not any(s.allocated for row in cortex.slices for s in row)


def train(cortex: Cortex, spec: StreamSpec, until: str = "perfect_eos", threshold: float = 0.95,
          windows: int = 3, on_step=None) -> Optional[int]:
    """Feed ``spec`` period by period until the cortex is trained.

    ``until="perfect_eos"`` stops once every rung reaches ``threshold``;
    ``until="ca3_free"`` stops once every CA3 slice (attention generators
    included) is deallocated. Returns the cycles used, or None if the stream
    ran out first.
    """
    if until not in ("perfect_eos", "ca3_free"):
        raise ContractError("until must be 'perfect_eos' or 'ca3_free'")
    period = period_length(spec)
    start = cortex.cycle
    for i, x in enumerate(multi_flow_stream(spec)):
        rep = cortex.step(x)
        if on_step is not None:
            on_step(rep, x)
        if (i + 1) % period:
            continue
        if until == "ca3_free":
            if ca3_free(cortex):
                return cortex.cycle - start
        else:
            pe = perfect_eos_by_rung(cortex, period, windows)
            if all(v is not None and v >= threshold for v in pe.values()):
                return cortex.cycle - start
    return None


# -- CLI -------------------------------------------------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hersim", description="Hierarchical cortical sequence simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, need_config):
        sp.add_argument("--config", required=need_config, help="YAML experiment configuration")
        sp.add_argument("--seed", type=int, help="override cortex.master_seed")
        sp.add_argument("--input", help="stream file or feature file (replaces the config input)")
        sp.add_argument("--checkpoint-in", help="load cortex state from this checkpoint")
        sp.add_argument("--checkpoint-out", help="write the final state here")
        sp.add_argument("--trace-dir", help="directory for CSV/JSON outputs")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        sp.add_argument("--stop", help="stop rule, e.g. 'perfect_eos>=0.95,cycles=20000'")

    common(sub.add_parser("run", help="build (or load) a cortex and stream input through it"), True)
    common(sub.add_parser("resume", help="continue from --checkpoint-in"), False)
    sp = sub.add_parser("inspect", help="print checkpoint statistics")
    sp.add_argument("checkpoint")
    sp = sub.add_parser("gen-stream", help="write the synthetic stream of a config to a file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, help="override the stream seed")
    sp.add_argument("--out", required=True)
    return p


def trace_level() -> int:
    try:
        return int(os.environ.get("HER_TRACE_LEVEL", "1"))
    except ValueError:
        return 1


def _cmd_run(args) -> int:
    level = trace_level()
    if args.cmd == "resume" and not args.checkpoint_in:
        print("resume needs --checkpoint-in", file=sys.stderr)
        return EXIT_USAGE
    meta: dict = {}
    spec = None
    if args.config:
        spec = load_experiment(args.config, args.input, args.seed)
    if args.checkpoint_in:
        cortex, meta = load_checkpoint(args.checkpoint_in, spec.cortex if spec else None, args.threads)
    else:
        cortex = Cortex(spec.cortex, args.threads)
    if spec is None:
        if not args.input:
            stream = iter(())
        else:
            spec = ExperimentSpec(cortex.cfg, input_path=args.input, period=meta.get("period"))
    rule = StopRule.parse(args.stop) if args.stop else (spec.stop if spec else StopRule())
    period = (spec.period if spec else None) or meta.get("period")
    if spec is not None:
        if spec.input_path is not None and not Path(spec.input_path).exists():
            raise FileNotFoundError(spec.input_path)
        stream = open_input(spec)
    trace = Path(args.trace_dir) if args.trace_dir else None
    if trace:
        trace.mkdir(parents=True, exist_ok=True)
    events = open(trace / "events.jsonl", "w") if trace and level >= 2 else None
    load_rows: list = []
    try:
        reason = run_experiment(cortex, stream, rule, period, level, events, load_rows)
    finally:
        if events:
            events.close()
        cortex.close()
    summary = run_summary(cortex, period, rule.windows)
    if trace:
        export_eos_ledger(cortex.ledger, trace / "eos_ledger.csv")
        export_synaptic_load(load_rows, trace / "synaptic_load.csv")
        export_stability(snapshot_stability(cortex), trace / "stability.csv")
        write_summary(summary, trace / "summary.json")
        write_summary({"outputs": sorted(p.name for p in trace.iterdir()) + ["manifest.json"],
                       "stop_reason": reason, "config_fingerprint": config_fingerprint(cortex.cfg)},
                      trace / "manifest.json")
    if args.checkpoint_out:
        save_checkpoint(cortex, args.checkpoint_out, {"period": period, "summary": summary})
    if level >= 1:
        print(json.dumps({"stop_reason": reason, **summary}, indent=2, sort_keys=True, default=str))
    if rule.perfect_eos is not None and reason != "stop" and rule.max_cycles is None:
        return EXIT_STOP_NOT_MET
    return EXIT_OK


def _cmd_inspect(args) -> int:
    manifest, blobs = parse_checkpoint(Path(args.checkpoint).read_bytes())
    cortex, meta = load_checkpoint(args.checkpoint)
    info = {
        "format_version": manifest["format_version"],
        "config_fingerprint": manifest["config_fingerprint"],
        "cycle": cortex.cycle,
        "columns_per_rung": [len(r) for r in cortex.columns],
        "synaptic_load": {str(r): v for r, v in cortex.synaptic_load().items()},
        "ca3_allocated": [[s.allocated for s in row] for row in cortex.slices],
        "l6a_known": [[c.l6a_state is KNOWN for c in row] for row in cortex.columns],
        "array_records": len(blobs),
        "saved_summary": meta.get("summary"),
    }
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def _cmd_gen_stream(args) -> int:
    spec = load_experiment(args.config)
    if spec.synthetic is None:
        raise ConfigError("gen-stream needs an input.synthetic section")
    if args.seed is not None:
        spec.synthetic.seed = args.seed
    n = write_stream_file(multi_flow_stream(spec.synthetic), spec.synthetic.n_flows, args.out)
    print(f"wrote {n} steps to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.cmd in ("run", "resume"):
            return _cmd_run(args)
        if args.cmd == "inspect":
            return _cmd_inspect(args)
        return _cmd_gen_stream(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
