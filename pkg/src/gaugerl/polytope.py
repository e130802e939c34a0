"""Halfspace polytopes, gauge (Minkowski) functions and gauge maps.

A polytope is stored as ``{x : F x <= g}``. Symmetric sets
``{-b <= V x <= b}`` are expanded into ``F = [V; -V]``, ``g = [b; b]`` so
every set in the package goes through one code path.

The gauge map sends the infinity-norm unit ball onto a C-set ``Q``::

    G(v | Q) = (||v||_inf / gauge_Q(v)) * v

which keeps the direction of ``v`` and maps the infinity-norm level set
``||v||_inf = t`` onto the gauge level set ``gauge_Q(w) = t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from gaugerl.config import TOL
from gaugerl.errors import DimensionMismatch, NotACSet, ZeroInput
from gaugerl.lp import LpProblem, LpStatus, solve_lp


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Polytope ``{x : F x <= g}``; immutable after construction."""

    F: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        F = np.array(self.F, dtype=float, ndmin=2)
        g = np.array(self.g, dtype=float).ravel()
        if F.shape[0] != g.size:
            raise DimensionMismatch(f"F has {F.shape[0]} rows but g has {g.size}")
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(g))):
            raise ValueError("polytope data must be finite")
        if F.size and np.any(np.all(F == 0.0, axis=1)):
            raise ValueError("all-zero row in F")
        F.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "g", g)

    @property
    def dim(self) -> int:
        return self.F.shape[1]

    @property
    def num_rows(self) -> int:
        return self.F.shape[0]

    @classmethod
    def symmetric(cls, V, bound) -> "HPolytope":
        """``{x : -bound <= V x <= bound}``."""
        V = np.array(V, dtype=float, ndmin=2)
        bound = np.broadcast_to(np.asarray(bound, dtype=float), (V.shape[0],))
        return cls(np.vstack([V, -V]), np.concatenate([bound, bound]))

    @classmethod
    def box(cls, bound) -> "HPolytope":
        """Axis-aligned box ``{x : |x_i| <= bound_i}``."""
        bound = np.atleast_1d(np.asarray(bound, dtype=float))
        return cls.symmetric(np.eye(bound.size), bound)

    @classmethod
    def unit_box(cls, dim: int) -> "HPolytope":
        return cls.box(np.ones(dim))

    def scaled(self, factor: float) -> "HPolytope":
        """``factor * P`` (for ``factor > 0``)."""
        return HPolytope(self.F, self.g * factor)

    def box_bounds(self):
        """Return ``(lo, hi)`` if this is an axis-aligned box with one row per face, else None."""
        n = self.dim
        if self.num_rows != 2 * n:
            return None
        lo = np.full(n, np.nan)
        hi = np.full(n, np.nan)
        for f, gi in zip(self.F, self.g):
            nz = np.flatnonzero(f)
            if nz.size != 1:
                return None
            j = nz[0]
            if f[j] > 0:
                hi[j] = gi / f[j]
            else:
                lo[j] = gi / f[j]
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            return None
        return lo, hi

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "g": self.g.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HPolytope":
        return cls(np.asarray(d["F"], dtype=float), np.asarray(d["g"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "HPolytope":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"HPolytope(dim={self.dim}, rows={self.num_rows})"


class GaugeValue(NamedTuple):
    value: float
    active_row: int


def _check_dim(P: HPolytope, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != P.dim:
        raise DimensionMismatch(f"vector of length {x.shape[-1]} vs polytope dim {P.dim}")
    return x


def contains(P: HPolytope, x, tol: float = TOL.contains) -> bool:
    x = _check_dim(P, x)
    return bool(np.all(P.F @ x <= P.g + tol))


def support(P: HPolytope, a) -> float:
    """``max_{x in P} a @ x``."""
    a = _check_dim(P, a)
    if not np.any(a):
        # still has to be nonempty for the value 0 to make sense
        sol = solve_lp(LpProblem(np.zeros(P.dim), P.F, P.g))
        if sol.status is LpStatus.INFEASIBLE:
            raise ValueError("support of an empty polytope")
        return 0.0
    sol = solve_lp(LpProblem(a, P.F, P.g))
    if sol.status is LpStatus.INFEASIBLE:
        raise ValueError("support of an empty polytope")
    if sol.status is LpStatus.UNBOUNDED:
        return float("inf")
    return sol.value


def is_bounded(P: HPolytope) -> bool:
    for j in range(P.dim):
        e = np.zeros(P.dim)
        for s in (1.0, -1.0):
            e[j] = s
            sol = solve_lp(LpProblem(e, P.F, P.g))
            if sol.status is not LpStatus.OPTIMAL:
                return False
    return True


def is_cset(P: HPolytope) -> bool:
    """Bounded with the origin strictly inside (every ``g_i`` above the strict tolerance)."""
    if np.any(P.g <= TOL.strict_interior):
        return False
    return is_bounded(P)


def _require_cset_rhs(Q: HPolytope) -> None:
    if np.any(Q.g <= 0.0):
        raise NotACSet("gauge requires g_i > 0 for every row")


def gauge_function(Q: HPolytope, v) -> GaugeValue:
    """Gauge of ``v`` w.r.t. the C-set ``Q``: ``max(0, max_i F_i v / g_i)``.

    Ties in the maximum go to the lowest row index.
    """
    _require_cset_rhs(Q)
    v = _check_dim(Q, v)
    ratios = (Q.F @ v) / Q.g
    i = int(np.argmax(ratios))
    return GaugeValue(max(0.0, float(ratios[i])), i)


def gauge_map(v, Q: HPolytope) -> np.ndarray:
    """Map ``v`` in the infinity-norm unit ball onto the C-set ``Q``."""
    _require_cset_rhs(Q)
    v = _check_dim(Q, v)
    norm = float(np.max(np.abs(v)))
    if norm == 0.0:
        return np.zeros_like(v)
    gam = float(np.max((Q.F @ v) / Q.g))
    return (norm / gam) * v


def gauge_map_general(v, P: HPolytope, Q: HPolytope) -> np.ndarray:
    """Map ``v`` in the C-set ``P`` onto the C-set ``Q`` by matching gauge levels."""
    _require_cset_rhs(P)
    _require_cset_rhs(Q)
    v = _check_dim(P, v)
    if P.dim != Q.dim:
        raise DimensionMismatch("P and Q must have the same dimension")
    gp = gauge_function(P, v).value
    if gp == 0.0:
        return np.zeros_like(v)
    return (gp / gauge_function(Q, v).value) * v


def gauge_map_jacobian(v, Q: HPolytope) -> np.ndarray:
    """Jacobian of the smooth branch of ``G(. | Q)`` selected at ``v``.

    With ``a`` the (lowest-index) coordinate attaining ``||v||_inf`` with sign
    ``s`` and ``i`` the active gauge row, locally ``G(v) = (s v_a / q) v``
    where ``q = F_i v / g_i``.
    """
    _require_cset_rhs(Q)
    v = _check_dim(Q, v)
    absv = np.abs(v)
    a = int(np.argmax(absv))
    if absv[a] == 0.0:
        raise ZeroInput("gauge map Jacobian is undefined at v = 0")
    return _branch_jacobian(v, Q.F, Q.g, a)


def _branch_jacobian(v, F, g, a) -> np.ndarray:
    sigma = 1.0 if v[a] > 0 else -1.0
    norm = sigma * v[a]
    ratios = (F @ v) / g
    i = int(np.argmax(ratios))
    q = ratios[i]
    grad = -(norm / (q * q * g[i])) * F[i]
    grad[a] += sigma / q
    J = np.outer(v, grad)
    J[np.diag_indices_from(J)] += norm / q
    return J


def translate(P: HPolytope, c) -> HPolytope:
    """``P - c`` as a set: ``x in P  <=>  x - c in translate(P, c)``."""
    c = _check_dim(P, c)
    return HPolytope(P.F, P.g - P.F @ c)


def inscribed_ball_radius(P: HPolytope, center=None) -> float:
    """Radius of the largest infinity-norm ball inside ``P``.

    With ``center`` given the ball is centered there; otherwise the center is
    optimized too (Chebyshev-style LP in the 1-norm dual).
    """
    dual_norm = np.abs(P.F).sum(axis=1)  # ||F_i||_1 bounds F_i . d over ||d||_inf <= t
    if center is not None:
        center = _check_dim(P, center)
        return float(np.min((P.g - P.F @ center) / dual_norm))
    n = P.dim
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A = np.hstack([P.F, dual_norm[:, None]])
    sol = solve_lp(LpProblem(c, A, P.g))
    if sol.status is not LpStatus.OPTIMAL:
        raise ValueError(f"inscribed ball LP {sol.status.value}")
    return sol.value
