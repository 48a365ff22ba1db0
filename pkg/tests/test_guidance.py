from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lorafuse.guidance import (GuidanceWeights, cfg_single, collective_guidance, dominant_weight_schedule,
                               non_dominant_weight)
from lorafuse.numerics import DimensionError, ParameterError
from oracles import w_dom_sequence

rng = np.random.default_rng(0)
small = st.floats(-100, 100, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-100)
grid = arrays(np.float64, (2, 4, 4), elements=small)


def test_cfg_examples():
    u, c = rng.standard_normal((2, 4, 4, 4))
    assert cfg_single(u, c, 1.0).tobytes() == c.tobytes()
    assert cfg_single(u, c, 0.0).tobytes() == u.tobytes()
    ref = np.empty_like(u)
    for idx in np.ndindex(u.shape):
        ref[idx] = (1 - 10) * u[idx] + 10 * c[idx]
    np.testing.assert_allclose(cfg_single(u, c, 10.0), ref, atol=1e-12)
    with pytest.raises(DimensionError):
        cfg_single(u, c[:2], 10.0)


def test_collective_examples():
    g = rng.standard_normal((4, 4))
    assert collective_guidance([g], [1.0]).tobytes() == g.tobytes()
    np.testing.assert_array_equal(collective_guidance([g, g, g], [1, 1, 1]), g)
    gs = rng.standard_normal((3, 4, 4))
    w = (2.0, 0.5, 0.5)
    ref = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            ref[i, j] = sum(w[k] * gs[k, i, j] for k in range(3)) / 3
    np.testing.assert_allclose(collective_guidance(list(gs), GuidanceWeights(w)), ref, atol=1e-12)
    with pytest.raises(ParameterError):
        collective_guidance([], [])
    with pytest.raises(ParameterError):
        collective_guidance([g], [1.0, 2.0])
    with pytest.raises(DimensionError):
        collective_guidance([g, g[:2]], [1.0, 1.0])


@given(st.lists(grid, min_size=1, max_size=4), st.data())
def test_collective_linear_in_weights(grids, data):
    n = len(grids)
    normal = st.floats(-4, 4, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-100)
    w = data.draw(st.lists(normal, min_size=n, max_size=n))
    k = data.draw(st.integers(-4, 4))
    scaled = collective_guidance(grids, [2.0 ** k * x for x in w])
    assert scaled.tobytes() == (2.0 ** k * collective_guidance(grids, w)).tobytes()


@given(grid, grid, st.floats(-3, 3, allow_nan=False))
def test_collective_linear_in_grids(a, b, w):
    lhs = collective_guidance([a + b, a], [w, 1.0])
    rhs = collective_guidance([a, a], [w, 1.0]) + collective_guidance([b, np.zeros_like(a)], [w, 1.0])
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_weight_schedule_examples():
    seq = [dominant_weight_schedule(5, i, exact=True)[0] for i in range(6)]
    assert seq == w_dom_sequence(5, 6)
    assert seq[:4] == [Fraction(9, 2), Fraction(4), Fraction(15, 4), Fraction(29, 8)]
    assert dominant_weight_schedule(5, 0, exact=True)[1] == Fraction(10, 17)
    assert non_dominant_weight(5, Fraction(9, 2)) == Fraction(10, 17)
    w, wn = dominant_weight_schedule(5, 0)
    assert w == 4.5 and wn == pytest.approx(10 / 17, abs=1e-15)


@given(st.integers(1, 12))
def test_unit_dominant_weight_gives_unit_non_dominant(n):
    w, wn = dominant_weight_schedule(n, 0, w_init=1.0, decay=False)
    assert w == 1.0 and wn == 1.0
    assert dominant_weight_schedule(n, 7, w_init=1.0, decay=False) == (1.0, 1.0)


@given(st.integers(2, 12), st.integers(0, 40))
def test_w_dom_decreasing_and_bounded(n, turns):
    seq = [dominant_weight_schedule(n, i, exact=True)[0] for i in range(turns + 2)]
    assert all(b < a for a, b in zip(seq, seq[1:]))
    assert all(w > n - Fraction(3, 2) for w in seq)
    assert all(w > 0 for w in seq)


def test_schedule_rejects_bad_args():
    with pytest.raises(ParameterError):
        dominant_weight_schedule(0, 0)
    with pytest.raises(ParameterError):
        dominant_weight_schedule(3, -1)
