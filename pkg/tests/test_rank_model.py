import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from drorecode.rank_model import (ChannelModel, build_table, eval_piecewise, expected_rank,
                                  expected_rank_integer, rank_transition)


def brute_expected_rank(p, r, t):
    k = np.arange(t + 1)
    return float(np.sum(stats.binom.pmf(k, t, 1 - p) * np.minimum(k, r)))


def test_integer_examples():
    m = ChannelModel(0.2, 16)
    assert expected_rank_integer(m, 0, 5) == 0.0
    assert expected_rank_integer(m, 1, 1) == pytest.approx(0.8, abs=1e-15)
    assert expected_rank_integer(m, 2, 3) == pytest.approx(1.888, abs=1e-12)


def test_fractional_examples():
    m = ChannelModel(0.2, 16)
    assert expected_rank(m, 1, 0.5) == pytest.approx(0.4, abs=1e-15)
    assert expected_rank(m, 2, 3.0) == pytest.approx(1.888, abs=1e-12)
    for r in range(17):
        assert expected_rank(m, r, 0.0) == 0.0


@given(p=st.floats(0.0, 0.9), r=st.integers(0, 12), t=st.integers(0, 40))
def test_integer_matches_scipy_binomial(p, r, t):
    m = ChannelModel(p, 12)
    assert expected_rank_integer(m, r, t) == pytest.approx(brute_expected_rank(p, r, t), abs=1e-12)


def test_rejects_bad_input():
    m = ChannelModel(0.2, 4)
    with pytest.raises(ValueError):
        expected_rank_integer(m, 5, 1)
    with pytest.raises(ValueError):
        expected_rank_integer(m, 1, -1)
    with pytest.raises(ValueError):
        expected_rank(m, 1, -0.5)
    with pytest.raises(ValueError):
        rank_transition(m, 6, 1.0)
    with pytest.raises(ValueError):
        ChannelModel(1.0, 4)
    with pytest.raises(ValueError):
        ChannelModel(0.2, 0)
    with pytest.raises(ValueError):
        ChannelModel(0.2, 257)


def test_table_examples(table16):
    assert table16.i_max[0] == 0
    assert table16.slopes[0][0] == 0.0
    assert table16.intercepts[0][0] == 0.0
    assert table16.slopes[1][0] == pytest.approx(0.8, abs=1e-15)


def test_table_invariants(table16):
    eps = table16.epsilon
    for r in range(17):
        v, d, z = table16.values[r], table16.slopes[r], table16.intercepts[r]
        im = table16.i_max[r]
        assert v.size == im + 2 and d.size == im + 1
        assert v[0] == 0.0
        assert np.all(v >= 0) and np.all(v <= r + 1e-12)
        np.testing.assert_array_equal(d, np.diff(v))
        np.testing.assert_array_equal(z, v[:-1] - np.arange(im + 1) * d)
        assert np.all(d >= -1e-15)
        assert np.all(np.diff(d) <= 1e-12)
        # i_max is the first index whose gain falls below epsilon
        assert d[im] < eps or im == 128
        assert np.all(d[:im] >= eps)


def test_table_values_match_direct_sum(table16):
    for r in (1, 5, 16):
        for i in range(int(table16.i_max[r]) + 2):
            assert table16.values[r][i] == pytest.approx(brute_expected_rank(0.2, r, i), abs=1e-12)


def test_hard_cap_and_epsilon():
    m = ChannelModel(0.2, 4)
    t = build_table(m, epsilon=1e-3, hard_cap=6)
    assert t.i_max.max() <= 6
    with pytest.raises(ValueError):
        build_table(m, epsilon=0.0)
    with pytest.raises(ValueError):
        build_table(m, hard_cap=3)


def test_piecewise_examples(table16):
    assert eval_piecewise(table16, 2, 3.0) == pytest.approx(1.888, abs=1e-12)
    assert eval_piecewise(table16, 1, 0.5) == pytest.approx(0.4, abs=1e-12)
    for r in range(17):
        assert eval_piecewise(table16, r, 0.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        eval_piecewise(table16, 1, table16.i_max[1] + 0.5)
    with pytest.raises(ValueError):
        eval_piecewise(table16, 1, -0.1)


@given(r=st.integers(0, 16), u=st.floats(0.0, 1.0))
def test_piecewise_equals_expected_rank(table16, model16, r, u):
    t = u * table16.i_max[r]
    assert eval_piecewise(table16, r, t) == pytest.approx(expected_rank(model16, r, t), abs=1e-12)


@given(r=st.integers(0, 16), u=st.floats(0.0, 1.0))
def test_every_piece_dominates(table16, model16, r, u):
    t = u * table16.i_max[r]
    e = expected_rank(model16, r, t)
    pieces = table16.slopes[r] * t + table16.intercepts[r]
    assert np.all(pieces >= e - 1e-12)


@given(p=st.floats(0.0, 0.8), r=st.integers(0, 8), t=st.floats(0.0, 30.0))
def test_transition_is_distribution_with_right_mean(p, r, t):
    m = ChannelModel(p, 8)
    h = rank_transition(m, r, t)
    assert h.shape == (9,)
    assert np.all(h >= 0)
    assert h.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(h[r + 1:] == 0)
    assert h @ np.arange(9) == pytest.approx(expected_rank(m, r, t), abs=1e-12)


def test_transition_examples():
    m = ChannelModel(0.2, 4)
    np.testing.assert_allclose(rank_transition(m, 2, 2), [0.04, 0.32, 0.64, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(rank_transition(m, 0, 3.7), [1, 0, 0, 0, 0])


@given(r=st.integers(0, 16), t1=st.floats(0, 40), t2=st.floats(0, 40))
def test_bounds_and_monotonicity(model16, r, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = expected_rank(model16, r, lo), expected_rank(model16, r, hi)
    assert 0.0 <= a <= b + 1e-12
    assert b <= r + 1e-12
    if r < 16:
        assert expected_rank(model16, r, hi) <= expected_rank(model16, r + 1, hi) + 1e-12


def test_concavity_second_differences(table16):
    for r in range(17):
        v = table16.values[r]
        assert np.all(v[2:] - 2 * v[1:-1] + v[:-2] <= 1e-12)


def test_padded_matrices_keep_envelope(table16):
    I = table16.max_segments + 3
    S, Z = table16.padded(I)
    assert S.shape == (17, I + 1)
    assert not S.flags.writeable
    for r in range(17):
        im = int(table16.i_max[r])
        assert np.all(S[r, im + 1:] == 0)
        assert np.all(Z[r, im + 1:] == table16.values[r][im])
        for t in np.linspace(0, im, 7):
            assert np.min(S[r] * t + Z[r]) == pytest.approx(eval_piecewise(table16, r, t), abs=1e-12)
    with pytest.raises(ValueError):
        table16.padded(table16.max_segments - 1)


def test_table_csv(tmp_path, table16):
    path = tmp_path / "table.csv"
    table16.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["r", "i", "E", "delta", "zeta"]
    assert len(rows) == int(np.sum(table16.i_max + 1))
    row = next(x for x in rows if x["r"] == "2" and x["i"] == "3")
    assert float(row["E"]) == pytest.approx(1.888, abs=1e-12)


def test_table_value_interpolates(table16, model16):
    for r, t in [(3, 2.25), (16, 10.5), (5, 0.0)]:
        assert table16.value(r, t) == pytest.approx(expected_rank(model16, r, t), abs=1e-12)
    assert math.isclose(table16.evaluate(np.zeros(17)).sum(), 0.0)
