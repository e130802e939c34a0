"""Dense two-phase tableau simplex for tiny linear programs.

Problems here have at most a few dozen variables and a few hundred rows
(support functions, redundancy checks, certificate verification), so the
whole tableau is kept as one dense array. Bland's rule guarantees
termination on degenerate problems.

    maximize    c @ x
    subject to  A_ub @ x <= b_ub
                A_eq @ x == b_eq
                lower <= x <= upper       (optional, may be +-inf)

Every Optimal answer is re-checked against its own dual certificate before
it is returned; a failed check raises :class:`NumericalFailure` rather than
handing back a wrong optimum.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from gaugerl.config import TOL
from gaugerl.errors import DimensionMismatch, NumericalFailure


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class LpProblem:
    objective: np.ndarray
    ineq_lhs: np.ndarray
    ineq_rhs: np.ndarray
    eq_lhs: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float).ravel()
        n = c.size
        A = np.asarray(self.ineq_lhs, dtype=float).reshape(-1, n)
        b = np.asarray(self.ineq_rhs, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise DimensionMismatch(f"ineq_lhs has {A.shape[0]} rows, ineq_rhs has {b.size}")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "ineq_lhs", A)
        object.__setattr__(self, "ineq_rhs", b)
        if (self.eq_lhs is None) != (self.eq_rhs is None):
            raise DimensionMismatch("eq_lhs and eq_rhs must be given together")
        if self.eq_lhs is not None:
            Ae = np.asarray(self.eq_lhs, dtype=float).reshape(-1, n)
            be = np.asarray(self.eq_rhs, dtype=float).ravel()
            if Ae.shape[0] != be.size:
                raise DimensionMismatch("eq_lhs / eq_rhs row count differs")
            object.__setattr__(self, "eq_lhs", Ae)
            object.__setattr__(self, "eq_rhs", be)
        for name in ("lower", "upper"):
            val = getattr(self, name)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), (n,)).copy()
                object.__setattr__(self, name, val)
        arrays = [c, A, b]
        if self.eq_lhs is not None:
            arrays += [self.eq_lhs, self.eq_rhs]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("LP data must be finite")

    @property
    def num_vars(self) -> int:
        return self.objective.size


@dataclass(frozen=True)
class LpSolution:
    status: LpStatus
    value: float
    point: np.ndarray
    ineq_dual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eq_dual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kkt_residual: float = 0.0
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    colv = T[:, col].copy()
    colv[row] = 0.0
    T -= np.outer(colv, T[row])


def _run_simplex(T, basis, n_allowed, max_iter, piv_tol, opt_tol):
    """Minimize the last-row objective of tableau ``T`` in place.

    Columns ``>= n_allowed`` (apart from the rhs) never enter the basis.
    Returns (status, iterations) with status in {"optimal", "unbounded"}.
    """
    m = T.shape[0] - 1
    it = 0
    while True:
        red = T[m, :n_allowed]
        cand = np.flatnonzero(red < -opt_tol)
        if cand.size == 0:
            return "optimal", it
        if it >= max_iter:
            raise NumericalFailure(f"simplex did not terminate after {max_iter} pivots")
        col = int(cand[0])  # Bland: lowest index entering
        colv = T[:m, col]
        rows = np.flatnonzero(colv > piv_tol)
        if rows.size == 0:
            return "unbounded", it
        ratios = T[rows, -1] / colv[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        # Bland: among tied rows leave the lowest-index basic variable
        row = int(ties[np.argmin(basis[ties])])
        _pivot(T, row, col)
        basis[row] = col
        it += 1


def solve_lp(p: LpProblem, max_iter: int | None = None) -> LpSolution:
    """Solve ``p`` (a maximization) by two-phase simplex with Bland's rule."""
    c = p.objective
    n = c.size
    rows_ub = [p.ineq_lhs]
    rhs_ub = [p.ineq_rhs]
    eye = np.eye(n)
    if p.upper is not None:
        fin = np.isfinite(p.upper)
        rows_ub.append(eye[fin])
        rhs_ub.append(p.upper[fin])
    if p.lower is not None:
        fin = np.isfinite(p.lower)
        rows_ub.append(-eye[fin])
        rhs_ub.append(-p.lower[fin])
    A = np.vstack(rows_ub)
    b = np.concatenate(rhs_ub)
    r_orig = p.ineq_lhs.shape[0]
    Ae = p.eq_lhs if p.eq_lhs is not None else np.zeros((0, n))
    be = p.eq_rhs if p.eq_rhs is not None else np.zeros(0)
    r = A.shape[0]
    m = r + Ae.shape[0]

    # row scaling for conditioning; duals are unscaled at the end
    full = np.vstack([A, Ae])
    norms = np.abs(full).max(axis=1, initial=0.0)
    scale = 1.0 / np.where(norms > 0, norms, 1.0)
    bs = np.concatenate([b, be]) * scale
    flip = np.where(bs < 0, -1.0, 1.0)
    cscale = float(np.abs(c).max(initial=0.0)) or 1.0

    # columns: x+ (n) | x- (n) | slacks (r) | artificials (m)
    n_struct = 2 * n + r
    ncol = n_struct + m
    M = np.zeros((m, ncol))
    As = full * (scale * flip)[:, None]
    M[:, :n] = As
    M[:, n:2 * n] = -As
    M[np.arange(r), 2 * n + np.arange(r)] = flip[:r]
    M[np.arange(m), n_struct + np.arange(m)] = 1.0
    rhs = bs * flip

    cost = np.zeros(ncol)
    cost[:n] = -c / cscale
    cost[n:2 * n] = c / cscale

    basis = np.where((np.arange(m) < r) & (flip > 0), 2 * n + np.arange(m), n_struct + np.arange(m))
    needs_art = basis >= n_struct

    if max_iter is None:
        max_iter = 50 * (ncol + m) + 200
    iters = 0
    T = np.zeros((m + 1, ncol + 1))
    T[:m, :ncol] = M
    T[:m, -1] = rhs
    kept = np.arange(m)

    if needs_art.any():
        T[m, n_struct + np.flatnonzero(needs_art)] = 1.0
        T[m] -= T[:m][needs_art].sum(axis=0)
        _, it = _run_simplex(T, basis, n_struct, max_iter, TOL.lp_pivot, 1e-12)
        iters += it
        if -T[m, -1] > TOL.lp_feasibility * max(1.0, float(np.abs(rhs).max(initial=0.0))):
            return LpSolution(LpStatus.INFEASIBLE, float("nan"), np.full(n, np.nan), iterations=iters)
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= n_struct:
                nz = np.flatnonzero(np.abs(T[i, :n_struct]) > 1e-9)
                if nz.size:
                    _pivot(T, i, int(nz[0]))
                    basis[i] = int(nz[0])
                else:
                    keep[i] = False  # redundant equality row
        T = np.vstack([T[:m][keep], np.zeros((1, ncol + 1))])
        basis = basis[keep]
        kept = kept[keep]
        m = basis.size

    T[m, :ncol] = cost
    T[m, -1] = 0.0
    T[m] -= cost[basis] @ T[:m]
    status, it = _run_simplex(T, basis, n_struct, max_iter, TOL.lp_pivot, 1e-12)
    iters += it
    if status == "unbounded":
        return LpSolution(LpStatus.UNBOUNDED, float("inf"), np.full(n, np.nan), iterations=iters)

    z = np.zeros(ncol)
    z[basis] = T[:m, -1]
    x = z[:n] - z[n:2 * n]

    # simplex multipliers from the final basis: B^T pi = c_B
    pi = np.zeros(len(scale))
    if m:
        try:
            pi[kept] = np.linalg.solve(M[kept][:, basis].T, cost[basis])
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("singular final basis") from exc
    y_all = -pi * flip * scale * cscale
    y_ub, y_eq = y_all[:r], y_all[r:]

    value = float(c @ x)
    kkt = _kkt_residual(c, A, b, Ae, be, x, y_ub, y_eq)
    if kkt > TOL.lp_optimality * (1.0 + abs(value)):
        raise NumericalFailure(f"KKT residual {kkt:.3e} exceeds tolerance")
    return LpSolution(LpStatus.OPTIMAL, value, x, y_ub[:r_orig], y_eq, kkt, iters)


def _kkt_residual(c, A, b, Ae, be, x, y, z) -> float:
    primal = 0.0
    if A.size:
        primal = max(primal, float(np.max(A @ x - b, initial=0.0)))
    if Ae.size:
        primal = max(primal, float(np.max(np.abs(Ae @ x - be), initial=0.0)))
    dual_sign = float(np.max(-y, initial=0.0))
    stat = float(np.max(np.abs(A.T @ y + Ae.T @ z - c), initial=0.0))
    gap = abs(float(c @ x - b @ y - be @ z))
    return max(primal, dual_sign, stat, gap)
