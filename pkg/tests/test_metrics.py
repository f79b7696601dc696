import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hersim.metrics import (
    EosLedger,
    cosine,
    drift_degrees,
    encoding_vector,
    eos_pattern,
    eos_rate,
    export_eos_ledger,
    export_similarity,
    matrix_similarity,
    perfect_eos_ratio,
    period_windows,
    power_estimate,
    similarity_matrix,
    stability_from_flags,
    write_summary,
)
from hersim.sdr_core import ContractError


def periodic_ledger(period, n_periods, offsets, columns=((0, 0),)):
    led = EosLedger(period=period)
    for col in columns:
        for p in range(n_periods):
            for off, tag in offsets:
                led.record(col, p * period + off, tag)
    return led


def test_identical_periods_score_one():
    led = periodic_ledger(10, 3, [(2, (0, 2)), (7, (1, 3))])
    assert perfect_eos_ratio(led, period_windows(0, 10, 3)) == 1.0


def test_one_extra_occurrence_out_of_ten_tags():
    led = EosLedger()
    for t in range(10):
        led.record((0, 0), t, (t, 0))
    led.record((0, 0), 9, (0, 0))
    for t in range(10):
        led.record((0, 0), 10 + t, (t, 0))
    assert perfect_eos_ratio(led, [(0, 10), (10, 20)]) == pytest.approx(0.9)


def test_speculative_entries_are_ignored():
    led = periodic_ledger(5, 2, [(1, (0, 1))])
    led.entries[(0, 0)].insert(1, (3, (9, 9), True))
    assert perfect_eos_ratio(led, period_windows(0, 5, 2)) == 1.0
    assert led.count() == 2 and led.count(real_only=False) == 3


def test_ledger_append_only():
    led = EosLedger()
    led.record((0, 0), 5, (0, 0))
    with pytest.raises(ContractError):
        led.record((0, 0), 4, (0, 0))
    with pytest.raises(ContractError):
        perfect_eos_ratio(led, [(0, 5)])


@given(st.permutations([(0, 0), (0, 1), (1, 0), (1, 1)]), st.lists(st.integers(0, 19), max_size=8))
def test_perfect_eos_is_column_permutation_invariant(order, cycles):
    base = {}
    for k, col in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        base[col] = sorted((c, (c % 3, k), False) for c in cycles[k:])
    shuffled = {order[i]: base[col] for i, col in enumerate(sorted(base))}
    w = period_windows(0, 10, 2)
    assert perfect_eos_ratio(base, w) == pytest.approx(perfect_eos_ratio(
        {col: shuffled[order[i]] for i, col in enumerate(sorted(base))}, w))
    assert 0.0 <= perfect_eos_ratio(shuffled, w) <= 1.0


def test_rate_and_pattern():
    led = periodic_ledger(6, 4, [(0, (0, 0)), (3, (0, 3))], columns=[(0, 0), (0, 1)])
    assert eos_rate(led, [(0, 0), (0, 1)], 0, 24) == pytest.approx(2 / 6)
    assert eos_pattern(led, 0, 6) == eos_pattern(led, 6, 12)
    assert led.window(6, 12).count() == 4
    assert led.restrict([(0, 1)]).columns() == [(0, 1)]


def test_stability_flags():
    assert stability_from_flags({(0, c): True for c in range(4)}) == {0: 1.0}
    flags = {(0, c): c != 2 for c in range(4)}
    assert stability_from_flags(flags) == {0: 0.75}


def test_cosine_and_drift():
    a = np.array([1.0, 2.0, 0.0])
    assert cosine(a, a) == pytest.approx(1.0)
    assert drift_degrees(a, 3 * a) == pytest.approx(0.0, abs=1e-6)
    assert cosine(np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    assert cosine(np.zeros(3), a) is None


def test_similarity_matrix_marks_undefined_pairs():
    m = similarity_matrix([np.array([1.0, 0]), np.zeros(2), np.array([1.0, 1.0])])
    assert np.isnan(m[1]).all() and np.isnan(m[:, 1]).all()
    assert m[0, 2] == pytest.approx(2 ** -0.5)
    assert matrix_similarity(m, m) == pytest.approx(1.0)


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.lists(st.floats(0, 10), min_size=3, max_size=3))
def test_cosine_of_non_negative_vectors_in_unit_interval(a, b):
    c = cosine(np.array(a), np.array(b))
    assert c is None or 0.0 <= c <= 1.0


def test_encoding_vector():
    v = encoding_vector({0: 2, 3: 2}, 4)
    assert v.tolist() == [0.5, 0, 0, 0.5]
    assert encoding_vector({1: 3}, 3, normalize=False).tolist() == [0, 3, 0]


def test_power_estimate():
    assert power_estimate(0.05, 1, 0.1) == pytest.approx(0.05)
    assert power_estimate(0.05, 2, 0.1) == pytest.approx(0.11)
    assert power_estimate(0.05, 200, 0.1) == pytest.approx(0.05 * 200 / 0.9)
    with pytest.raises(ContractError):
        power_estimate(0.05, 2, 1.0)


def test_exports(tmp_path):
    led = periodic_ledger(4, 2, [(1, (0, 1))])
    led.record((0, 0), 9, (2, 0), speculative=True)
    export_eos_ledger(led, tmp_path / "eos.csv")
    rows = list(csv.reader(open(tmp_path / "eos.csv")))
    assert rows[0] == ["rung", "column", "cycle", "stream_id", "offset", "speculative"]
    assert rows[-1] == ["0", "0", "9", "2", "0", "1"]
    m = np.array([[1.0, np.nan], [np.nan, 1.0]])
    export_similarity(m, ["a", "b"], tmp_path / "sim.csv")
    assert list(csv.reader(open(tmp_path / "sim.csv")))[1] == ["a", "1.000000", ""]
    write_summary({"cycles": 3}, tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text()) == {"cycles": 3}
