import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinelab import tensor as T
from spinelab.band import (BandThresholds, band_regularizer, band_thresholds, hinge_penalties,
                           quantile_tensor, violation_rate)
from spinelab.forks import fork_count, select_forking
from spinelab.oracles import oracle_hinges, oracle_quantile


def test_fork_examples():
    h = np.array([0.1, 0.5, 0.3, 0.9, 0.2, 0.05, 0.7, 0.0, 0.4, 0.6])
    fm = select_forking(h, 0.2)
    assert fm.k_selected == 2 and set(np.flatnonzero(fm.mask)) == {3, 6}
    assert select_forking([0.0], 0.2).mask.tolist() == [True]
    fm = select_forking([.1, .9, .9, .1, .5], 0.4)
    assert fm.k_selected == 2 and np.flatnonzero(fm.mask).tolist() == [1, 2]


def test_fork_ties_prefer_earlier():
    fm = select_forking([0.5, 0.5, 0.5, 0.5], 0.5)
    assert np.flatnonzero(fm.mask).tolist() == [0, 1]


def test_fork_count_rounding():
    assert fork_count(10, 0.2) == 2
    assert fork_count(11, 0.2) == 3
    assert fork_count(3, 0.1) == 1
    assert fork_count(5, 0.6) == 3  # 0.6 * 5 is 3.0000000000000004 in binary


def test_fork_rejects_bad_input():
    with pytest.raises(ValueError):
        select_forking([], 0.2)
    with pytest.raises(ValueError):
        select_forking([1.0], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 340), min_size=1, max_size=60), st.floats(0.01, 1.0))
def test_fork_cardinality_and_dominance(h, ratio):
    h = np.asarray(h) / 100.0
    fm = select_forking(h, ratio)
    assert fm.mask.sum() == fm.k_selected == max(1, math.ceil(ratio * len(h) - 1e-9))
    if (~fm.mask).any():
        assert h[fm.mask].min() >= h[~fm.mask].max()
    # monotone transform invariance
    assert np.array_equal(select_forking(np.exp(2 * h) + 1, ratio).mask, fm.mask)


def test_band_examples():
    b = band_thresholds([1, 2, 3, 4, 5], 0.1, 0.5)
    assert b.h_low == pytest.approx(1.4, abs=1e-12) and b.h_high == pytest.approx(3.0, abs=1e-12)
    b = band_thresholds([2.5])
    assert (b.h_low, b.h_high) == (2.5, 2.5)
    b = band_thresholds([0.7] * 6)
    assert (b.h_low, b.h_high) == (0.7, 0.7)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 3.4), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 1))
def test_band_matches_oracle(h, q1, q2):
    ql, qh = min(q1, q2), max(q1, q2)
    b = band_thresholds(h, ql, qh)
    assert b.h_low == pytest.approx(oracle_quantile(h, ql), abs=1e-12)
    assert b.h_high == pytest.approx(oracle_quantile(h, qh), abs=1e-12)
    assert min(h) - 1e-12 <= b.h_low <= b.h_high <= max(h) + 1e-12
    q = quantile_tensor(T.Tensor(np.asarray(h, dtype=float)), ql).item()
    assert q == pytest.approx(oracle_quantile(h, ql), abs=1e-12)


def test_hinge_examples():
    band = BandThresholds(1.0, 2.0)
    assert hinge_penalties(1.5, band) == (0.0, 0.0)
    assert hinge_penalties(2.3, band) == pytest.approx((0.0, 0.3))
    assert hinge_penalties(0.8, band) == pytest.approx((0.2, 0.0))
    for h in (0.3, 1.0, 1.7, 2.0, 2.9):
        assert hinge_penalties(h, band) == pytest.approx(oracle_hinges(h, 1.0, 2.0))


def test_regularizer_examples():
    ent = T.Tensor([[1.5]], requires_grad=True)
    m = np.ones((1, 1))
    val = band_regularizer(ent, m, [0.5], [1.0], 0.05, 0.1)
    assert val.item() == pytest.approx(0.05 / (1 + 1e-6), rel=1e-12)
    assert band_regularizer(ent, m, [0.5], [1.0], 0.0, 0.0).item() == 0.0
    inside = T.Tensor([[0.7, 0.9]])
    assert band_regularizer(inside, np.ones((1, 2)), [0.5], [1.0], 0.05, 0.05).item() == 0.0


def test_regularizer_slopes():
    h = np.array([[0.1, 0.6, 1.8, 2.5]])
    m = np.array([[1, 1, 1, 0]], dtype=float)
    ent = T.Tensor(h, requires_grad=True)
    with T.fresh_tape():
        T.backward(band_regularizer(ent, m, [0.5], [1.0], 0.05, 0.1))
    w = 1 / (3 + 1e-6)
    np.testing.assert_allclose(ent.grad, [[-0.05 * w, 0.0, 0.1 * w, 0.0]], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3.4), min_size=2, max_size=20))
def test_regularizer_nonnegative(h):
    ent = T.Tensor(np.asarray([h]))
    b = band_thresholds(h)
    v = band_regularizer(ent, np.ones((1, len(h))), [b.h_low], [b.h_high], 0.05, 0.05).item()
    assert v >= 0
    rate = violation_rate(np.asarray([h]), np.ones((1, len(h)), dtype=bool), [b.h_low], [b.h_high])
    assert (v == 0) == (rate == 0)


def test_thresholds_are_stop_gradient():
    rng = np.random.default_rng(0)
    h0 = rng.uniform(0, 2, size=8)
    m = np.ones((1, 8))

    def grads(live_thresholds):
        ent = T.Tensor(h0.reshape(1, 8), requires_grad=True)
        with T.fresh_tape():
            row = T.reshape(ent, (8,))
            if live_thresholds:
                # thresholds computed from a graph hanging off the same leaf
                b = band_thresholds(T.exp(T.log(row)), 0.1, 0.5)
            else:
                b = BandThresholds(*literal)
            loss = band_regularizer(ent, m, [b.h_low], [b.h_high], 0.05, 0.05)
            T.backward(loss)
        return loss.item(), ent.grad

    b = band_thresholds(h0, 0.1, 0.5)
    literal = (b.h_low, b.h_high)
    assert literal[0] == pytest.approx(oracle_quantile(h0, 0.1), abs=1e-12)
    v1, g1 = grads(True)
    v2, g2 = grads(False)
    assert v1 == v2 and np.array_equal(g1, g2)
    assert g1 is not None and np.any(g1 != 0)
