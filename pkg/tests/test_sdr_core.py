import numpy as np
import pytest
from hypothesis import given, strategies as st

from hersim.sdr_core import (
    PERM_ONE,
    ContractError,
    PredictionMultiset,
    Sdr,
    concat,
    multiset_merge,
    overlap,
    perm_f,
    perm_q,
    random_sdr,
    rng_from_state,
    rng_state,
    rng_stream,
    split,
    union_all,
)


def sdrs(width=64):
    return st.sets(st.integers(0, width - 1), max_size=12).map(lambda s: Sdr(width, s))


def test_overlap_examples():
    assert overlap(Sdr(32, [1, 5, 9]), Sdr(32, [5, 9, 20])) == 2
    assert overlap(Sdr(121), Sdr(121, range(40))) == 0
    a = Sdr(121, range(0, 80, 2))
    assert overlap(a, a) == 40


def test_overlap_width_mismatch():
    with pytest.raises(ContractError):
        overlap(Sdr(4, [1]), Sdr(5, [1]))


def test_constructor_rejects_bad_indices():
    with pytest.raises(ContractError):
        Sdr(4, [4])
    with pytest.raises(ContractError):
        Sdr(0)


def test_union_and_concat():
    assert union_all([Sdr(8, [1, 2]), Sdr(8, [2, 3])]) == Sdr(8, [1, 2, 3])
    x = Sdr(8, [0, 7])
    assert union_all([x]) == x
    assert concat([Sdr(4, [1]), Sdr(4, [0])]) == Sdr(8, [1, 4])
    with pytest.raises(ContractError):
        union_all([])


def test_multiset_merge_examples():
    m = multiset_merge([Sdr(8, [1, 2]), Sdr(8, [2, 3])])
    assert m.counts == {1: 1, 2: 2, 3: 1}
    assert len(multiset_merge([])) == 0
    same = multiset_merge([Sdr(8, [0, 4, 6])] * 5)
    assert set(same.counts.values()) == {5}
    assert same.support() == Sdr(8, [0, 4, 6])


def test_multiset_rejects_negative_and_out_of_range():
    with pytest.raises(ContractError):
        PredictionMultiset(4, {1: -1})
    with pytest.raises(ContractError):
        PredictionMultiset(4, {4: 1})


def test_random_sdr_is_seeded():
    a = random_sdr(121, 4, rng_stream(3, "x"))
    assert a == random_sdr(121, 4, rng_stream(3, "x"))
    assert a.active == (7, 28, 59, 69)
    assert random_sdr(121, 0, rng_stream(3, "x")) == Sdr(121)


def test_random_sdr_bits_are_uniform():
    # 10^4 draws: every bit frequency stays inside 3 sigma of Binomial(10^4, 4/121)
    rng = rng_stream(0, "test/random_sdr")
    counts = np.zeros(121)
    for _ in range(10_000):
        counts[list(random_sdr(121, 4, rng).active)] += 1
    p = 4 / 121
    mu, sd = 1e4 * p, np.sqrt(1e4 * p * (1 - p))
    assert np.all(np.abs(counts - mu) <= 3 * sd)
    assert counts.sum() == 40_000


def test_streams_are_independent_of_creation_order():
    a1 = rng_stream(5, "a").random(4)
    _ = rng_stream(5, "b").random(100)
    assert np.array_equal(a1, rng_stream(5, "a").random(4))
    assert not np.array_equal(a1, rng_stream(5, "b").random(4))
    assert not np.array_equal(a1, rng_stream(6, "a").random(4))


def test_rng_state_roundtrip_continues_identically():
    g = rng_stream(1, "p")
    g.random(7)
    h = rng_from_state(rng_state(g))
    assert np.array_equal(g.random(50), h.random(50))


def test_fixed_point_permanence():
    assert perm_q(1.0) == PERM_ONE
    assert perm_q(0.0) == 0
    assert perm_f(perm_q(0.5)) == pytest.approx(0.5, abs=1 / PERM_ONE)


@given(sdrs())
def test_text_roundtrip(x):
    assert Sdr.from_text(x.to_text()) == x
    assert Sdr.from_dense(x.dense()) == x


@given(sdrs(), sdrs())
def test_overlap_symmetric_and_bounded(a, b):
    o = overlap(a, b)
    assert o == overlap(b, a)
    assert 0 <= o <= min(len(a), len(b))


@given(st.lists(sdrs(16), min_size=1, max_size=5))
def test_split_inverts_concat(xs):
    joined = concat(xs)
    assert joined.width == 16 * len(xs)
    assert split(joined, [16] * len(xs)) == xs
    assert len(joined) == sum(len(x) for x in xs)


@given(st.lists(sdrs(16), min_size=1, max_size=6))
def test_merge_support_is_union(xs):
    m = multiset_merge(xs)
    assert m.support() == union_all(xs)
    assert sum(m.counts.values()) == sum(len(x) for x in xs)
