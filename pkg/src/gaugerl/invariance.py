"""Robust controlled-invariant sets for ``x+ = A x + B u + E d``.

A certificate is a pair ``(S, K)`` with ``S = {x : -s_bar <= Vs x <= s_bar}``
and a linear gain ``K`` such that

* ``(A + B K) S + E D`` is contained in ``S`` (invariance),
* ``S`` is contained in ``X`` (safety),
* ``K S`` is contained in ``U`` (control bounds).

Certificates are either loaded from JSON (e.g. produced by external SDP
tooling) or computed here as the maximal robust positively invariant set of
a fixed gain, with :func:`gain_search` picking among candidate gains.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from gaugerl.config import TOL
from gaugerl.errors import (
    DimensionMismatch,
    EmptyInterior,
    GaugeRLError,
    NoValidGain,
    NotConverged,
    StateOnBoundary,
    StateOutsideS,
)
from gaugerl.lp import LpProblem, LpStatus, solve_lp
from gaugerl.polytope import HPolytope, inscribed_ball_radius, support, translate

logger = logging.getLogger(__name__)


class UnstableClosedLoop(GaugeRLError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SafetySystem:
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    U: HPolytope
    D: HPolytope
    X: HPolytope

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        B = np.array(self.B, dtype=float, ndmin=2)
        E = np.array(self.E, dtype=float, ndmin=2)
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or E.shape[0] != n:
            raise DimensionMismatch(f"A {A.shape}, B {B.shape}, E {E.shape} are inconsistent")
        if self.U.dim != B.shape[1] or self.D.dim != E.shape[1] or self.X.dim != n:
            raise DimensionMismatch("U, D, X dimensions do not match B, E, A")
        for M in (A, B, E):
            M.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "E", E)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.E.shape[1]

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "E": self.E.tolist(),
            "U": self.U.to_dict(),
            "D": self.D.to_dict(),
            "X": self.X.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SafetySystem":
        return cls(
            np.asarray(d["A"], dtype=float),
            np.asarray(d["B"], dtype=float),
            np.asarray(d["E"], dtype=float),
            HPolytope.from_dict(d["U"]),
            HPolytope.from_dict(d["D"]),
            HPolytope.from_dict(d["X"]),
        )


def _row_tightenings(Vs: np.ndarray, E: np.ndarray, D: HPolytope):
    """Per-row ``min`` and ``max`` of ``Vs_i E d`` over ``d`` in ``D``."""
    W = Vs @ E
    hi = np.array([support(D, w) if np.any(w) else 0.0 for w in W])
    lo = np.array([-support(D, -w) if np.any(w) else 0.0 for w in W])
    return lo, hi


@dataclass(frozen=True, eq=False)
class RciCertificate:
    Vs: np.ndarray
    s_bar: np.ndarray
    K: np.ndarray
    tighten_lo: np.ndarray
    tighten_hi: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("Vs", "s_bar", "K", "tighten_lo", "tighten_hi"):
            arr = np.array(getattr(self, name), dtype=float, ndmin=2 if name in ("Vs", "K") else 1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        r = self.Vs.shape[0]
        if self.s_bar.shape != (r,) or self.tighten_lo.shape != (r,) or self.tighten_hi.shape != (r,):
            raise DimensionMismatch("Vs, s_bar and tightenings disagree on the row count")
        if self.K.shape[1] != self.Vs.shape[1]:
            raise DimensionMismatch("K and Vs disagree on the state dimension")
        if np.any(self.s_bar <= 0):
            raise ValueError("s_bar must be strictly positive")

    @classmethod
    def build(cls, Vs, s_bar, K, sys: SafetySystem, meta: dict | None = None) -> "RciCertificate":
        Vs = np.array(Vs, dtype=float, ndmin=2)
        lo, hi = _row_tightenings(Vs, sys.E, sys.D)
        return cls(Vs, s_bar, K, lo, hi, dict(meta or {}))

    @property
    def S(self) -> HPolytope:
        return HPolytope.symmetric(self.Vs, self.s_bar)

    @property
    def num_rows(self) -> int:
        return self.Vs.shape[0]

    def to_dict(self) -> dict:
        return {
            "Vs": self.Vs.tolist(),
            "s_bar": self.s_bar.tolist(),
            "K": self.K.tolist(),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict, sys: SafetySystem) -> "RciCertificate":
        return cls.build(d["Vs"], d["s_bar"], d["K"], sys, d.get("meta"))

    @classmethod
    def load(cls, path, sys: SafetySystem) -> "RciCertificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), sys)


def tighten(cert: RciCertificate, sys: SafetySystem):
    """Return ``(tighten_lo, tighten_hi)``: extrema of ``Vs_i E d`` over ``D``."""
    if cert.Vs.shape[1] != sys.n:
        raise DimensionMismatch("certificate and system state dimensions differ")
    return _row_tightenings(cert.Vs, sys.E, sys.D)


def state_margin(cert: RciCertificate, x) -> float:
    """Smallest relative distance ``(s_bar_i - |Vs_i x|) / s_bar_i`` to the boundary of S."""
    return float(np.min((cert.s_bar - np.abs(cert.Vs @ x)) / cert.s_bar))


def safe_action_set(cert: RciCertificate, sys: SafetySystem, x, tol: float = TOL.safety_membership) -> HPolytope:
    """Polytope of inputs that keep ``A x + B u + E d`` in S for every ``d`` in D."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise DimensionMismatch(f"state of shape {x.shape}, expected ({sys.n},)")
    if np.any(np.abs(cert.Vs @ x) > cert.s_bar + tol):
        raise StateOutsideS("state is not in S")
    VB = cert.Vs @ sys.B
    VAx = cert.Vs @ (sys.A @ x)
    F = np.vstack([sys.U.F, VB, -VB])
    g = np.concatenate([sys.U.g, cert.s_bar - cert.tighten_hi - VAx, cert.s_bar + cert.tighten_lo + VAx])
    # rows of S that the input cannot move only constrain x (already known to hold)
    norms = np.abs(F).max(axis=1)
    live = norms > 1e-14 * max(1.0, norms.max())
    if np.any(g[~live] < -tol):
        raise StateOutsideS("no input keeps the successor in S")
    return HPolytope(F[live], g[live])


def shifted_safe_action_set(cert: RciCertificate, sys: SafetySystem, x) -> HPolytope:
    """``safe_action_set(x) - K x``; a C-set for ``x`` strictly inside S."""
    x = np.asarray(x, dtype=float)
    if state_margin(cert, x) < TOL.interior_eps:
        if np.any(np.abs(cert.Vs @ x) > cert.s_bar + TOL.safety_membership):
            raise StateOutsideS("state is not in S")
        raise StateOnBoundary("state is within interior_eps of the boundary of S")
    return translate(safe_action_set(cert, sys, x), cert.K @ x)


@dataclass
class VerificationReport:
    """Worst-case slack per constraint row of each containment check."""

    slacks: dict[str, np.ndarray]
    tol: float = TOL.certificate

    @property
    def valid(self) -> bool:
        return all(np.all(s >= -self.tol) for s in self.slacks.values())

    def violations(self) -> dict[str, list[int]]:
        return {k: np.flatnonzero(s < -self.tol).tolist() for k, s in self.slacks.items() if np.any(s < -self.tol)}

    def worst(self) -> dict[str, float]:
        return {k: float(s.min()) if s.size else float("inf") for k, s in self.slacks.items()}

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "tol": self.tol,
            "worst_slack": self.worst(),
            "violated_rows": self.violations(),
            "slacks": {k: v.tolist() for k, v in self.slacks.items()},
        }

    def format(self) -> str:
        lines = [f"certificate {'VALID' if self.valid else 'INVALID'} (tol {self.tol:g})"]
        for name, s in self.slacks.items():
            bad = np.flatnonzero(s < -self.tol)
            status = "ok" if bad.size == 0 else f"violated rows {bad.tolist()}"
            lines.append(f"  {name:<10s} rows={s.size:4d}  worst slack={s.min():+.3e}  {status}")
        return "\n".join(lines)


def _max_over(P: HPolytope, directions: np.ndarray) -> np.ndarray:
    return np.array([support(P, a) for a in directions])


def verify_certificate(cert: RciCertificate, sys: SafetySystem, tol: float = TOL.certificate) -> VerificationReport:
    """Check invariance, safety and control bounds of ``cert`` by support-function LPs over S."""
    if cert.Vs.shape[1] != sys.n or cert.K.shape != (sys.m, sys.n):
        raise DimensionMismatch("certificate does not match the system dimensions")
    S = cert.S
    Acl = sys.A + sys.B @ cert.K
    lo, hi = _row_tightenings(cert.Vs, sys.E, sys.D)
    VA = cert.Vs @ Acl
    inv_hi = cert.s_bar - hi - _max_over(S, VA)
    inv_lo = cert.s_bar + lo - _max_over(S, -VA)
    safety = sys.X.g - _max_over(S, sys.X.F)
    control = sys.U.g - _max_over(S, sys.U.F @ cert.K)
    return VerificationReport(
        {
            "invariance": np.concatenate([inv_hi, inv_lo]),
            "safety": safety,
            "control": control,
        },
        tol,
    )


def symmetric_rows(P: HPolytope, tol: float = 1e-12):
    """Split ``P`` into ``(V, b)`` with ``P = {-b <= V x <= b}``; None if P is not row-symmetric."""
    F, g = P.F, P.g
    used = np.zeros(F.shape[0], dtype=bool)
    V, b = [], []
    for i in range(F.shape[0]):
        if used[i]:
            continue
        match = np.flatnonzero(
            ~used
            & (np.abs(F + F[i]).max(axis=1) <= tol * max(1.0, np.abs(F[i]).max()))
            & (np.abs(g - g[i]) <= tol * max(1.0, abs(g[i])))
        )
        match = match[match != i]
        if match.size == 0:
            return None
        used[i] = used[match[0]] = True
        V.append(F[i])
        b.append(g[i])
    return np.array(V).reshape(-1, P.dim), np.array(b)


def _normalize(V, s):
    norms = np.linalg.norm(V, axis=1)
    return V / norms[:, None], s / norms


def _sym_support(V, s, c) -> float:
    """``max c @ x`` over ``{-s <= V x <= s}``."""
    sol = solve_lp(LpProblem(c, np.vstack([V, -V]), np.concatenate([s, s])))
    if sol.status is LpStatus.UNBOUNDED:
        # only while pruning: the remaining rows leave the set open, so row i is needed
        return float("inf")
    if sol.status is not LpStatus.OPTIMAL:
        raise EmptyInterior(f"support LP over the iterate is {sol.status.value}")
    return sol.value


def _prune(V, s, tol):
    """Drop rows implied by the others (pairs at a time, symmetric form)."""
    keep = np.ones(V.shape[0], dtype=bool)
    for i in range(V.shape[0]):
        keep[i] = False
        if not keep.any() or _sym_support(V[keep], s[keep], V[i]) > s[i] + tol:
            keep[i] = True
    return V[keep], s[keep]


def max_rpi_for_gain(
    sys: SafetySystem,
    K,
    max_iter: int = 200,
    tol: float = TOL.rpi_redundancy,
    history: list | None = None,
) -> HPolytope:
    """Maximal robust positively invariant set of ``x+ = (A + B K) x + E d`` inside
    ``X`` intersected with ``{x : K x in U}``.

    Iterates ``S_{k+1} = S_k  intersect  {x : (A + B K) x in S_k - E D}`` (Pontryagin
    difference by row-wise tightening). Only the rows added in the previous
    iteration generate new candidates; each candidate is kept only if it cuts
    the current set by more than ``tol``. X, U and D must be origin-symmetric,
    and the result is returned in expanded symmetric form.

    Raises
    ------
    UnstableClosedLoop
        If ``A + B K`` has spectral radius >= 1.
    NotConverged
        If no fixed point is reached within ``max_iter`` iterations.
    EmptyInterior
        If some tightened bound drops to zero or below.
    """
    K = np.array(K, dtype=float, ndmin=2)
    if K.shape != (sys.m, sys.n):
        raise DimensionMismatch(f"K has shape {K.shape}, expected {(sys.m, sys.n)}")
    Acl = sys.A + sys.B @ K
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl))))
    if rho >= 1.0:
        raise UnstableClosedLoop(f"closed-loop spectral radius {rho:.6f} >= 1")

    symX = symmetric_rows(sys.X)
    symU = symmetric_rows(sys.U)
    if symX is None or symU is None or not _is_symmetric_set(sys.D):
        raise ValueError("maximal RPI iteration needs origin-symmetric X, U and D")
    Vx, xb = symX
    Vu, ub = symU
    V0 = np.vstack([Vx, Vu @ K])
    s0 = np.concatenate([xb, ub])
    live = np.linalg.norm(V0, axis=1) > 0
    V, s = _normalize(V0[live], s0[live])
    if np.any(s <= 0):
        raise EmptyInterior("initial constraint set has no interior")
    V, s = _prune(V, s, tol)
    if history is not None:
        history.append(HPolytope.symmetric(V, s))

    frontier = np.arange(V.shape[0])
    for it in range(1, max_iter + 1):
        cand_V = V[frontier] @ Acl
        shrink = np.array([support(sys.D, w) if np.any(w) else 0.0 for w in V[frontier] @ sys.E])
        cand_s = s[frontier] - shrink
        norms = np.linalg.norm(cand_V, axis=1)
        zero = norms <= 1e-13
        if np.any(cand_s[zero] < 0):
            raise EmptyInterior("a disturbance-only constraint cannot be met")
        cand_V, cand_s = cand_V[~zero], cand_s[~zero]
        if np.any(cand_s <= 0):
            raise EmptyInterior(f"tightened bound became non-positive at iteration {it}")
        cand_V, cand_s = _normalize(cand_V, cand_s)
        added = []
        for c, b in zip(cand_V, cand_s):
            if _sym_support(V, s, c) > b + tol:
                V = np.vstack([V, c])
                s = np.append(s, b)
                added.append(V.shape[0] - 1)
        logger.debug("rpi iteration %d: %d candidates, %d added, %d rows", it, len(cand_s), len(added), V.shape[0])
        if not added:
            V, s = _prune(V, s, tol)
            out = HPolytope.symmetric(V, s)
            if history is not None:
                history.append(out)
            if inscribed_ball_radius(out, np.zeros(sys.n)) <= TOL.strict_interior:
                raise EmptyInterior("fixed point has no interior")
            return out
        # pruning keeps the row count in check; the frontier is re-indexed after it
        new_rows = V[added]
        V, s = _prune(V, s, tol)
        frontier = np.array([i for i in range(V.shape[0]) if any(np.array_equal(V[i], r) for r in new_rows)], dtype=int)
        if history is not None:
            history.append(HPolytope.symmetric(V, s))
    raise NotConverged(f"no fixed point after {max_iter} iterations")


def _is_symmetric_set(P: HPolytope) -> bool:
    return symmetric_rows(P) is not None


def riccati_gain(A, B, Q, R, discount: float = 1.0) -> np.ndarray:
    """Gain ``K`` (``u = K x``) minimizing the discounted quadratic cost of the nominal system."""
    sq = np.sqrt(discount)
    P = scipy.linalg.solve_discrete_are(sq * A, sq * B, Q, R)
    return -np.linalg.solve(R + discount * B.T @ P @ B, discount * B.T @ P @ A)


def _bound_scales(P: HPolytope, dim: int) -> np.ndarray:
    """Half-widths of ``P`` along the coordinate axes (support LPs)."""
    widths = np.empty(dim)
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = 1.0
        widths[j] = 0.5 * (support(P, e) + support(P, -e))
    return widths


def candidate_gains(
    sys: SafetySystem,
    state_weights=(0.1, 1.0, 10.0),
    input_weights=(0.1, 1.0, 10.0),
    discount: float = 0.99,
    include_zero: bool = True,
) -> list[np.ndarray]:
    """Riccati gains over a small weight grid, plus ``K = 0``.

    Weights are Bryson-scaled: state ``j`` is penalized by ``q / xw_j**2`` and
    input ``k`` by ``r / uw_k**2``, with ``xw`` and ``uw`` the half-widths of X
    and U along the axes.
    """
    qs = 1.0 / _bound_scales(sys.X, sys.n) ** 2
    rs = 1.0 / _bound_scales(sys.U, sys.m) ** 2
    gains = []
    for qw in state_weights:
        for rw in input_weights:
            try:
                K = riccati_gain(sys.A, sys.B, np.diag(qw * qs), np.diag(rw * rs), discount)
            except (np.linalg.LinAlgError, ValueError):
                continue
            gains.append(K)
    if include_zero:
        gains.append(np.zeros((sys.m, sys.n)))
    return gains


@dataclass
class GainSearchResult:
    certificate: RciCertificate
    report: VerificationReport
    scores: list[dict]


def gain_search(sys: SafetySystem, candidates, max_iter: int = 200) -> GainSearchResult:
    """Maximal RPI set for each candidate gain; keep the verified one with the largest inscribed box."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate list is empty")
    best = None
    scores = []
    for idx, K in enumerate(candidates):
        entry = {"index": idx, "status": "ok", "radius": None, "rows": None}
        try:
            S = max_rpi_for_gain(sys, K, max_iter=max_iter)
            Vs, s_bar = symmetric_rows(S)
            cert = RciCertificate.build(Vs, s_bar, K, sys, {"source": "max_rpi_for_gain", "candidate": idx})
            report = verify_certificate(cert, sys)
        except (GaugeRLError, np.linalg.LinAlgError) as exc:
            entry["status"] = f"{type(exc).__name__}: {exc}"
            scores.append(entry)
            logger.info("candidate %d rejected: %s", idx, entry["status"])
            continue
        radius = inscribed_ball_radius(cert.S)
        entry.update(radius=radius, rows=cert.num_rows, valid=report.valid)
        scores.append(entry)
        if not report.valid:
            entry["status"] = "verification failed"
            continue
        if best is None or radius > best[0]:
            best = (radius, cert, report)
    if best is None:
        raise NoValidGain("no candidate gain produced a verified certificate")
    radius, cert, report = best
    meta = dict(cert.meta)
    meta.update(inscribed_radius=radius, tolerances={"certificate": TOL.certificate, "rpi_redundancy": TOL.rpi_redundancy})
    cert = RciCertificate(cert.Vs, cert.s_bar, cert.K, cert.tighten_lo, cert.tighten_hi, meta)
    return GainSearchResult(cert, report, scores)
