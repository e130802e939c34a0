import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaugerl.config import TOL
from gaugerl.errors import DimensionMismatch, NotACSet, ZeroInput
from gaugerl.polytope import (
    HPolytope,
    contains,
    gauge_function,
    gauge_map,
    gauge_map_general,
    gauge_map_jacobian,
    inscribed_ball_radius,
    is_bounded,
    is_cset,
    support,
    translate,
)
from oracles import central_diff, gauge_bisection, lp_max_by_vertices, random_cset, rel_err


def rand_q(rng, dim=None, rows=None):
    dim = dim or int(rng.integers(1, 5))
    rows = rows or int(rng.integers(2 * dim, 17))
    return HPolytope(*random_cset(rng, dim, rows))


def test_symmetric_expansion():
    P = HPolytope.symmetric([[1.0, 2.0]], 3.0)
    np.testing.assert_array_equal(P.F, [[1.0, 2.0], [-1.0, -2.0]])
    np.testing.assert_array_equal(P.g, [3.0, 3.0])


def test_rejects_zero_row_and_mismatch():
    with pytest.raises(ValueError):
        HPolytope([[0.0, 0.0], [1.0, 0.0]], [1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        HPolytope([[1.0, 0.0]], [1.0, 1.0])


def test_immutable():
    P = HPolytope.unit_box(2)
    with pytest.raises(ValueError):
        P.g[0] = 5.0


def test_json_roundtrip():
    P = HPolytope.box([1.0, 2.0])
    Q = HPolytope.from_json(P.to_json())
    np.testing.assert_array_equal(P.F, Q.F)
    np.testing.assert_array_equal(P.g, Q.g)
    assert set(json.loads(P.to_json())) == {"F", "g"}


def test_box_bounds():
    lo, hi = HPolytope.box([1.0, 2.0]).box_bounds()
    np.testing.assert_array_equal(lo, [-1.0, -2.0])
    np.testing.assert_array_equal(hi, [1.0, 2.0])
    assert HPolytope([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]], np.ones(4)).box_bounds() is None


# contains

def test_contains_examples():
    B = HPolytope.unit_box(2)
    assert contains(B, np.zeros(2))
    assert not contains(B, np.array([1 + 2 * TOL.contains, 0.0]))
    with pytest.raises(DimensionMismatch):
        contains(B, np.zeros(3))


def test_contains_matches_direct_check(rng):
    for _ in range(100):
        Q = rand_q(rng)
        x = rng.uniform(-2, 2, Q.dim)
        assert contains(Q, x, 0.0) == bool(np.all(Q.F @ x <= Q.g))


# is_cset / boundedness

def test_is_cset_examples():
    assert is_cset(HPolytope.unit_box(3))
    assert not is_cset(HPolytope([[1.0, 0.0]], [1.0]))
    shifted = translate(HPolytope.unit_box(2), np.array([1.0, 0.0]))
    assert np.any(shifted.g == 0.0)
    assert not is_cset(shifted)
    assert not is_bounded(HPolytope([[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0]))


# support

def test_support_examples(rng):
    B = HPolytope.unit_box(3)
    a = rng.standard_normal(3)
    assert support(B, a) == pytest.approx(np.abs(a).sum())
    assert support(B, np.zeros(3)) == 0.0
    assert support(HPolytope([[1.0, 0.0]], [1.0]), np.array([0.0, 1.0])) == float("inf")


@pytest.mark.parametrize("seed", range(20))
def test_support_matches_vertex_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    Q = rand_q(rng)
    a = rng.standard_normal(Q.dim)
    assert support(Q, a) == pytest.approx(lp_max_by_vertices(a, Q.F, Q.g)[0], abs=1e-8)


# gauge function

def test_gauge_of_box_is_inf_norm(rng):
    B = HPolytope.unit_box(4)
    for _ in range(20):
        v = rng.standard_normal(4)
        assert gauge_function(B, v).value == pytest.approx(np.abs(v).max(), abs=1e-15)
        assert gauge_function(B.scaled(2.0), v).value == pytest.approx(np.abs(v).max() / 2, abs=1e-15)


def test_gauge_tie_break_lowest_row():
    B = HPolytope.unit_box(2)
    assert gauge_function(B, np.array([1.0, 1.0])).active_row == 0
    assert gauge_function(B, np.array([-1.0, 1.0])).active_row == 1


def test_gauge_requires_positive_rhs():
    with pytest.raises(NotACSet):
        gauge_function(HPolytope([[1.0], [-1.0]], [1.0, 0.0]), np.array([1.0]))


@pytest.mark.parametrize("seed", range(20))
def test_gauge_matches_bisection(seed):
    rng = np.random.default_rng(seed)
    Q = rand_q(rng)
    for _ in range(10):
        v = rng.standard_normal(Q.dim)
        assert gauge_function(Q, v).value == pytest.approx(gauge_bisection(Q.F, Q.g, v), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.0, 50.0))
def test_gauge_positive_homogeneity(seed, lam):
    rng = np.random.default_rng(seed)
    Q = rand_q(rng)
    v = rng.standard_normal(Q.dim)
    assert gauge_function(Q, lam * v).value == pytest.approx(lam * gauge_function(Q, v).value, abs=1e-10, rel=1e-12)


# gauge map

def test_gauge_map_box_identity_and_scaling(rng):
    B = HPolytope.unit_box(3)
    for _ in range(20):
        v = rng.uniform(-1, 1, 3)
        np.testing.assert_allclose(gauge_map(v, B), v, atol=1e-15)
        np.testing.assert_allclose(gauge_map(v, B.scaled(2.0)), 2 * v, atol=1e-15)
    np.testing.assert_array_equal(gauge_map(np.zeros(3), B), np.zeros(3))


@pytest.mark.parametrize("seed", range(10))
def test_gauge_map_direction_and_level(seed):
    rng = np.random.default_rng(seed)
    Q = rand_q(rng)
    for _ in range(100):
        v = rng.uniform(-1, 1, Q.dim)
        w = gauge_map(v, Q)
        assert gauge_function(Q, w).value == pytest.approx(np.abs(v).max(), abs=1e-9)
        # parallel and same orientation
        assert w @ v > 0
        assert np.linalg.norm(w / np.linalg.norm(w) - v / np.linalg.norm(v)) < 1e-12
        assert contains(Q, w, 1e-9)


def test_gauge_map_boundary_to_boundary(rng):
    for _ in range(10):
        Q = rand_q(rng)
        v = rng.uniform(-1, 1, Q.dim)
        v /= np.abs(v).max()
        assert gauge_function(Q, gauge_map(v, Q)).value == pytest.approx(1.0, abs=1e-9)


def test_gauge_map_injective(rng):
    Q = rand_q(rng, 3, 10)
    V = rng.uniform(-1, 1, (1000, 3))
    W = np.array([gauge_map(v, Q) for v in V])
    D = np.linalg.norm(W[:, None, :] - W[None, :, :], axis=2)
    np.fill_diagonal(D, np.inf)
    assert D.min() > 0


def test_gauge_map_general_examples(rng):
    Q = rand_q(rng, 3, 9)
    B = HPolytope.unit_box(3)
    v = rng.uniform(-0.5, 0.5, 3)
    np.testing.assert_allclose(gauge_map_general(v, Q, Q), v, atol=1e-14)
    np.testing.assert_allclose(gauge_map_general(v, B, Q), gauge_map(v, Q), atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_gauge_map_general_roundtrip(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 5))
    P, Q = rand_q(rng, dim), rand_q(rng, dim)
    for _ in range(20):
        v = gauge_map(rng.uniform(-1, 1, dim), P)  # a point of P
        w = gauge_map_general(v, P, Q)
        assert gauge_function(Q, w).value == pytest.approx(gauge_function(P, v).value, abs=1e-9)
        np.testing.assert_allclose(gauge_map_general(w, Q, P), v, atol=1e-8)


# jacobian

def test_jacobian_box_cases():
    B = HPolytope.unit_box(3)
    v = np.array([0.3, -0.7, 0.1])
    np.testing.assert_allclose(gauge_map_jacobian(v, B), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(gauge_map_jacobian(v, B.scaled(2.0)), 2 * np.eye(3), atol=1e-14)
    with pytest.raises(ZeroInput):
        gauge_map_jacobian(np.zeros(3), B)


def test_jacobian_matches_finite_differences(rng):
    total = agree = 0
    for _ in range(20):
        Q = rand_q(rng)
        for _ in range(20):
            v = rng.uniform(-1, 1, Q.dim)
            total += 1
            J = gauge_map_jacobian(v, Q)
            Jfd = central_diff(lambda z: gauge_map(z, Q), v)
            agree += rel_err(J, Jfd) <= 1e-5
    assert agree >= 0.99 * total


# translate / inscribed ball

def test_translate_examples(rng):
    B = HPolytope.unit_box(2)
    T = translate(B, np.zeros(2))
    np.testing.assert_array_equal(T.g, B.g)
    assert not is_cset(translate(B, np.array([1.0, 1.0])))
    for _ in range(50):
        Q = rand_q(rng, 2, 6)
        c, x = rng.uniform(-1, 1, 2), rng.uniform(-2, 2, 2)
        assert contains(Q, x, 0.0) == contains(translate(Q, c), x - c, 0.0)


def test_inscribed_ball_radius():
    assert inscribed_ball_radius(HPolytope.box([1.0, 3.0])) == pytest.approx(1.0)
    assert inscribed_ball_radius(HPolytope.box([1.0, 3.0]), np.array([0.5, 0.0])) == pytest.approx(0.5)
    tri = HPolytope([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], [1.0, 0.0, 0.0])
    # center (c, c) with c >= r and 2c + 2r <= 1 gives r = 1/4
    assert inscribed_ball_radius(tri) == pytest.approx(0.25)
