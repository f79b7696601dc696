import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from hersim.cortex import Cortex, CortexConfig
from hersim.harness import (
    EXIT_BAD_CONFIG,
    EXIT_CHECKPOINT,
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_STOP_NOT_MET,
    EXIT_USAGE,
    CheckpointError,
    ConfigError,
    StopRule,
    benchmark_spec,
    checkpoint_bytes,
    checkpoint_roundtrip,
    experiment_from_dict,
    load_checkpoint,
    main,
    parse_checkpoint,
    read_stream_file,
    save_checkpoint,
    train,
    word_spec,
    WORD_SET_A,
    write_stream_file,
)
from hersim.periphery import multi_flow_stream, period_length

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.yaml"


def small_config(tmp_path, **over):
    d = yaml.safe_load(CONFIG.read_text())
    d["input"]["synthetic"]["repeats"] = 20
    for k, v in over.items():
        d[k] = v
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


def test_stop_rule_parse():
    r = StopRule.parse("perfect_eos>=0.95, cycles=100")
    assert r.perfect_eos == 0.95 and r.max_cycles == 100
    assert StopRule.parse("stability=500").stability_window == 500
    with pytest.raises(ConfigError):
        StopRule.parse("eventually")


def test_experiment_validation():
    d = yaml.safe_load(CONFIG.read_text())
    spec = experiment_from_dict(d, seed=7)
    assert spec.cortex.master_seed == 7 and spec.period == 24
    with pytest.raises(ConfigError):
        experiment_from_dict({**d, "extra": 1})
    with pytest.raises(ConfigError):
        experiment_from_dict({"cortex": {"width": 2, "bogus": 1}, "input": d["input"]})
    with pytest.raises(ConfigError):
        experiment_from_dict({"cortex": {}, "input": {}})
    bad = json.loads(json.dumps(d))
    bad["input"]["synthetic"]["n_flows"] = 3
    with pytest.raises(ConfigError):
        experiment_from_dict(bad)


def test_roundtrip_with_zero_steps():
    assert checkpoint_roundtrip(Cortex(CortexConfig()))


def test_checkpoint_continuation_is_bit_identical(tmp_path):
    cx = Cortex(CortexConfig(master_seed=2))
    stream = multi_flow_stream(benchmark_spec(repeats=30))
    for _, x in zip(range(300), stream):
        cx.step(x)
    save_checkpoint(cx, tmp_path / "a.ck")
    twin, _ = load_checkpoint(tmp_path / "a.ck", expected=cx.cfg)
    assert checkpoint_bytes(twin) == checkpoint_bytes(cx)
    for _, x in zip(range(200), stream):
        assert cx.step(x) == twin.step(x)
    assert checkpoint_bytes(twin) == checkpoint_bytes(cx)


def test_corrupted_checkpoint_is_rejected(tmp_path):
    cx = Cortex(CortexConfig())
    p = tmp_path / "c.ck"
    save_checkpoint(cx, p)
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad = tmp_path / "bad.ck"
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"not a checkpoint at all")
    assert load_checkpoint(p)[0].cycle == 0
    with pytest.raises(CheckpointError):
        load_checkpoint(p, expected=CortexConfig(master_seed=99))


def test_checkpoint_size_tracks_synapses():
    cx = Cortex(CortexConfig())
    small = len(checkpoint_bytes(cx))
    for x in multi_flow_stream(benchmark_spec(repeats=40)):
        cx.step(x)
    assert len(checkpoint_bytes(cx)) > small


def test_stream_file_roundtrip(tmp_path):
    spec = benchmark_spec(repeats=2)
    items = list(multi_flow_stream(spec))
    write_stream_file(items, 2, tmp_path / "s.txt")
    assert list(read_stream_file(tmp_path / "s.txt")) == items


def test_train_recipe_returns_cycles():
    cx = Cortex(CortexConfig())
    used = train(cx, word_spec(WORD_SET_A, repeats=3))
    assert used is None and cx.cycle == 3 * period_length(word_spec(WORD_SET_A))


def test_cli_run_and_resume(tmp_path, capsys):
    cfg = small_config(tmp_path)
    ck, trace = tmp_path / "out.ck", tmp_path / "trace"
    code = main(["run", "--config", str(cfg), "--threads", "1", "--stop", "cycles=200",
                 "--checkpoint-out", str(ck), "--trace-dir", str(trace)])
    assert code == EXIT_OK
    first = json.loads(capsys.readouterr().out)
    assert first["cycles"] == 200 and first["stop_reason"] == "max_cycles"
    assert {"eos_ledger.csv", "summary.json", "manifest.json", "stability.csv",
            "synaptic_load.csv"} <= {p.name for p in trace.iterdir()}
    assert main(["resume", "--checkpoint-in", str(ck)]) == EXIT_OK
    again = json.loads(capsys.readouterr().out)
    saved = load_checkpoint(ck)[1]["summary"]
    again.pop("stop_reason")
    assert json.loads(json.dumps(saved)) == again
    assert main(["inspect", str(ck)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["cycle"] == 200


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("cortex: [unclosed\n")
    trace = tmp_path / "never"
    assert main(["run", "--config", str(bad), "--trace-dir", str(trace)]) == EXIT_BAD_CONFIG
    assert not trace.exists()
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_MISSING_FILE
    assert main(["run", "--config", str(small_config(tmp_path)), "--input",
                 str(tmp_path / "nofile.txt")]) == EXIT_MISSING_FILE
    junk = tmp_path / "junk.ck"
    junk.write_bytes(b"HERCKPT\0" + b"\0" * 40)
    assert main(["resume", "--checkpoint-in", str(junk)]) == EXIT_CHECKPOINT
    assert main(["resume"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run", "--config", str(small_config(tmp_path)), "--threads", "1",
                 "--stop", "perfect_eos>=1.01"]) == EXIT_STOP_NOT_MET
    capsys.readouterr()


def test_gen_stream_matches_config(tmp_path, capsys):
    out = tmp_path / "s.txt"
    assert main(["gen-stream", "--config", str(small_config(tmp_path)), "--out", str(out)]) == EXIT_OK
    assert len(list(read_stream_file(out))) == 20 * 24
    capsys.readouterr()
