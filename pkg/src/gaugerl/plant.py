"""Linearized swing-equation grid: network reduction, discretization, disturbances, rollouts.

State ordering is ``x = [delta_1..delta_N, omega_1..omega_N]``; inputs are IBR
power injections and disturbances are load deviations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from gaugerl.errors import DimensionMismatch, DisconnectedNetwork, GaugeRLError, SingularInertia
from gaugerl.invariance import SafetySystem
from gaugerl.polytope import HPolytope, support

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent / "data"


class RolloutError(GaugeRLError, RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"policy failed at step {step}: {type(cause).__name__}: {cause}")
        self.step = step


def _laplacian(lines, buses):
    index = {b: i for i, b in enumerate(buses)}
    L = np.zeros((len(buses), len(buses)))
    for f, t, b in lines:
        i, j = index[f], index[t]
        L[i, i] += b
        L[j, j] += b
        L[i, j] -= b
        L[j, i] -= b
    return L, index


def _network(lines, generator_buses, extra_buses=()):
    lines = [(int(f), int(t), float(b)) for f, t, b in lines]
    gens = [int(g) for g in generator_buses]
    if len(set(gens)) != len(gens):
        raise ValueError("generator buses must be distinct")
    buses = sorted({f for f, _, _ in lines} | {t for _, t, _ in lines} | set(gens) | {int(b) for b in extra_buses})
    L, index = _laplacian(lines, buses)
    adj = (np.abs(L) > 0).astype(int)
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise DisconnectedNetwork(f"network has {ncomp} connected components")
    g = [index[b] for b in gens]
    o = [i for i in range(len(buses)) if i not in g]
    return L, index, g, o


def dc_stiffness(lines, generator_buses) -> np.ndarray:
    """Kron-reduce the DC network Laplacian onto the generator buses.

    ``lines`` is an iterable of ``(from_bus, to_bus, susceptance)``.
    """
    L, _, g, o = _network(lines, generator_buses)
    Lgg = L[np.ix_(g, g)]
    if not o:
        return Lgg
    Lgo = L[np.ix_(g, o)]
    Loo = L[np.ix_(o, o)]
    K = Lgg - Lgo @ np.linalg.solve(Loo, Lgo.T)
    return 0.5 * (K + K.T)


def injection_participation(lines, generator_buses, injection_buses) -> np.ndarray:
    """Share of a unit injection at each bus that is picked up by each generator.

    Returns an ``N x k`` matrix whose columns sum to one. Injections at a
    generator bus go entirely to that generator.
    """
    L, index, g, o = _network(lines, generator_buses, injection_buses)
    out = np.zeros((len(g), len(injection_buses)))
    if o:
        T = -L[np.ix_(g, o)] @ np.linalg.inv(L[np.ix_(o, o)])
    for k, bus in enumerate(injection_buses):
        i = index[int(bus)]
        if i in g:
            out[g.index(i), k] = 1.0
        else:
            out[:, k] = T[:, o.index(i)]
    return out


@dataclass(frozen=True, eq=False)
class GridCase:
    M_diag: np.ndarray
    D_diag: np.ndarray
    Kstiff: np.ndarray
    B_hat: np.ndarray
    E_hat: np.ndarray
    tau: float
    x_bar: np.ndarray
    u_bar: np.ndarray
    d_bar: np.ndarray
    alpha: float = 0.8
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    untimed_input_blocks: bool = False
    name: str = "case"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("M_diag", "D_diag", "x_bar", "u_bar", "d_bar"):
            object.__setattr__(self, k, np.atleast_1d(np.asarray(getattr(self, k), dtype=float)))
        for k in ("Kstiff", "B_hat", "E_hat"):
            object.__setattr__(self, k, np.array(getattr(self, k), dtype=float, ndmin=2))
        N = self.M_diag.size
        if self.D_diag.size != N or self.Kstiff.shape != (N, N):
            raise DimensionMismatch("M, D and Kstiff disagree on the generator count")
        if self.B_hat.shape[0] != N or self.E_hat.shape[0] != N:
            raise DimensionMismatch("placement matrices need one row per generator")
        if self.x_bar.size != 2 * N or self.u_bar.size != self.m or self.d_bar.size != self.p:
            raise DimensionMismatch("bound vectors do not match the case dimensions")
        if np.any(self.D_diag < 0):
            raise ValueError("damping must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        Q = np.diag(np.r_[np.full(N, 1000.0), np.full(N, 10.0)]) if self.Q is None else np.array(self.Q, dtype=float, ndmin=2)
        R = 5.0 * np.eye(self.m) if self.R is None else np.array(self.R, dtype=float, ndmin=2)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def N(self) -> int:
        return self.M_diag.size

    @property
    def m(self) -> int:
        return self.B_hat.shape[1]

    @property
    def p(self) -> int:
        return self.E_hat.shape[1]

    @property
    def n(self) -> int:
        return 2 * self.N

    def safety_system(self) -> SafetySystem:
        A, B, E = build_dynamics(self)
        return SafetySystem(A, B, E, HPolytope.box(self.u_bar), HPolytope.box(self.d_bar), HPolytope.box(self.x_bar))

    @classmethod
    def from_dict(cls, d: dict) -> "GridCase":
        """Build from the JSON case-file layout (see ``data/wscc9.json``)."""
        gens = d["generators"]
        buses = [g["bus"] for g in gens]
        lines = [(ln["from"], ln["to"], ln["susceptance"]) for ln in d["lines"]]
        Kstiff = dc_stiffness(lines, buses)
        if "B_hat" in d:
            B_hat = np.asarray(d["B_hat"], dtype=float)
        else:
            B_hat = injection_participation(lines, buses, [i["bus"] for i in d["ibrs"]])
        if "E_hat" in d:
            E_hat = np.asarray(d["E_hat"], dtype=float)
        else:
            # a load draw is a negative injection
            E_hat = -injection_participation(lines, buses, [ld["bus"] for ld in d["loads"]])
        N, m, p = len(gens), B_hat.shape[1], E_hat.shape[1]
        bnd = d["bounds"]
        x_bar = np.r_[np.broadcast_to(bnd["angle"], (N,)), np.broadcast_to(bnd["frequency"], (N,))]
        cost = d.get("cost", {})
        Q = np.diag(np.r_[np.full(N, cost.get("angle", 1000.0)), np.full(N, cost.get("frequency", 10.0))])
        R = cost.get("input", 5.0) * np.eye(m)
        return cls(
            M_diag=[g["M"] for g in gens],
            D_diag=[g["D"] for g in gens],
            Kstiff=Kstiff,
            B_hat=B_hat,
            E_hat=E_hat,
            tau=float(d["tau"]),
            x_bar=x_bar,
            u_bar=np.broadcast_to(bnd["ibr"], (m,)),
            d_bar=np.broadcast_to(bnd["load"], (p,)),
            alpha=float(d.get("alpha", 0.8)),
            Q=Q,
            R=R,
            untimed_input_blocks=bool(d.get("untimed_input_blocks", False)),
            name=d.get("name", "case"),
            meta={k: d[k] for k in ("description", "notes") if k in d},
        )


def load_case(path) -> GridCase:
    with open(path) as fh:
        return GridCase.from_dict(json.load(fh))


def default_case_path() -> Path:
    return DATA_DIR / "wscc9.json"


def build_dynamics(case: GridCase):
    """Forward-Euler discretization of the swing equations: returns ``(A, B, E)``.

    ``B`` and ``E`` carry the step ``tau`` like the coupling blocks of ``A``
    unless ``case.untimed_input_blocks`` is set, in which case they are
    ``[0; M^-1 B_hat]`` and ``[0; M^-1 E_hat]``.
    """
    if np.any(case.M_diag == 0):
        raise SingularInertia("every generator needs a nonzero inertia")
    N, tau = case.N, case.tau
    Minv = np.diag(1.0 / case.M_diag)
    I = np.eye(N)
    A = np.block([[I, tau * I], [-tau * Minv @ case.Kstiff, I - tau * Minv @ np.diag(case.D_diag)]])
    scale = 1.0 if case.untimed_input_blocks else tau
    B = np.vstack([np.zeros((N, case.m)), scale * Minv @ case.B_hat])
    E = np.vstack([np.zeros((N, case.p)), scale * Minv @ case.E_hat])
    return A, B, E


def step(A, B, E, x, u, d) -> np.ndarray:
    x, u, d = (np.asarray(v, dtype=float) for v in (x, u, d))
    if x.shape[-1] != A.shape[1] or u.shape[-1] != B.shape[1] or d.shape[-1] != E.shape[1]:
        raise DimensionMismatch("state, input or disturbance width does not match the system")
    return A @ x + B @ u + E @ d


def stage_cost(x, u, Q, R) -> float:
    return float(x @ Q @ x + u @ R @ u)


@dataclass(frozen=True, eq=False)
class DisturbanceModel:
    """Autoregressive load noise ``d+ = alpha d + (1 - alpha) d_hat`` with ``d_hat ~ U(D)``."""

    alpha: float
    D: HPolytope
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        box = self.D.box_bounds()
        if box is None:
            dim = self.D.dim
            lo = np.array([-support(self.D, -e) for e in np.eye(dim)])
            hi = np.array([support(self.D, e) for e in np.eye(dim)])
            box = (lo, hi)
        object.__setattr__(self, "_box", box)
        object.__setattr__(self, "_is_box", self.D.box_bounds() is not None)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def uniform(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self._box
        while True:
            d = rng.uniform(lo, hi)
            if self._is_box or np.all(self.D.F @ d <= self.D.g + 1e-12):
                return d


def sample_disturbance(model: DisturbanceModel, d_prev, rng: np.random.Generator) -> np.ndarray:
    d_hat = model.uniform(rng)
    return model.alpha * np.asarray(d_prev, dtype=float) + (1.0 - model.alpha) * d_hat


def disturbance_sequence(model: DisturbanceModel, T: int, rng: np.random.Generator) -> np.ndarray:
    """``T`` consecutive AR iterates, started from a uniform draw over D."""
    out = np.empty((T, model.D.dim))
    d = model.uniform(rng)
    for t in range(T):
        out[t] = d
        d = sample_disturbance(model, d, rng)
    return out


def sample_uniform_polytope(P: HPolytope, rng: np.random.Generator, size: int = 1, max_batches: int = 10_000) -> np.ndarray:
    """Exact uniform samples from a bounded polytope by rejection from its bounding box."""
    dim = P.dim
    lo = np.array([-support(P, -e) for e in np.eye(dim)])
    hi = np.array([support(P, e) for e in np.eye(dim)])
    out = []
    got = 0
    for _ in range(max_batches):
        cand = rng.uniform(lo, hi, size=(max(64, 4 * size), dim))
        ok = np.all(cand @ P.F.T <= P.g, axis=1)
        out.append(cand[ok])
        got += int(ok.sum())
        if got >= size:
            return np.concatenate(out)[:size]
    raise RuntimeError("rejection sampling acceptance rate too low")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    disturbances: np.ndarray
    costs: np.ndarray
    violations: np.ndarray
    action_violations: np.ndarray
    fallbacks: np.ndarray

    def __post_init__(self):
        T = self.actions.shape[0]
        if self.states.shape[0] != T + 1 or any(len(a) != T for a in (self.disturbances, self.costs, self.violations)):
            raise DimensionMismatch("trajectory arrays have inconsistent lengths")

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    @property
    def num_violations(self) -> int:
        return int(np.count_nonzero(self.violations > 0))

    @property
    def num_action_violations(self) -> int:
        return int(np.count_nonzero(self.action_violations > 0))

    def max_abs(self, idx) -> float:
        return float(np.max(np.abs(self.states[:, idx])))

    def to_csv(self, path, header_comment: str | None = None, angle_idx=None) -> None:
        """One row per step; ``angle_idx`` adds the largest absolute angle of ``x_t``."""
        n, m, p = self.states.shape[1], self.actions.shape[1], self.disturbances.shape[1]
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i+1}" for i in range(n)] + [f"u_{i+1}" for i in range(m)]
                       + [f"d_{i+1}" for i in range(p)] + ["cost", "violation", "fallback"]
                       + ([] if angle_idx is None else ["max_abs_angle"]))
            for t in range(self.T):
                row = ([t] + [repr(float(v)) for v in self.states[t]] + [repr(float(v)) for v in self.actions[t]]
                       + [repr(float(v)) for v in self.disturbances[t]]
                       + [repr(float(self.costs[t])), repr(float(self.violations[t])), int(self.fallbacks[t])])
                if angle_idx is not None:
                    row.append(repr(float(np.max(np.abs(self.states[t, angle_idx])))))
                w.writerow(row)


def rollout(policy, system: SafetySystem, model: DisturbanceModel | None, x0, T: int, rng=None, Q=None, R=None,
            disturbances=None) -> Trajectory:
    """Simulate ``T`` steps of ``policy`` (a callable ``x -> u``).

    Disturbances come from ``disturbances`` when given (shape ``(T, p)``),
    otherwise from the AR ``model`` driven by ``rng``. The violation recorded at
    step ``t`` is that of the successor state ``x_{t+1}`` w.r.t. X.
    """
    from gaugerl.policy import violation

    if T < 1:
        raise ValueError("T must be at least 1")
    n, m, p = system.n, system.m, system.p
    Q = np.eye(n) if Q is None else Q
    R = np.eye(m) if R is None else R
    if disturbances is None:
        disturbances = disturbance_sequence(model, T, rng)
    disturbances = np.asarray(disturbances, dtype=float)
    if disturbances.shape != (T, p):
        raise DimensionMismatch(f"disturbance sequence has shape {disturbances.shape}, expected {(T, p)}")
    xs = np.empty((T + 1, n))
    us = np.empty((T, m))
    costs = np.empty(T)
    viol = np.empty(T)
    uviol = np.empty(T)
    fb = np.zeros(T, dtype=bool)
    xs[0] = x0
    A, B, E = system.A, system.B, system.E
    for t in range(T):
        try:
            u = np.asarray(policy(xs[t]), dtype=float)
        except Exception as exc:
            raise RolloutError(t, exc) from exc
        fb[t] = bool(getattr(policy, "last_fallback", False))
        us[t] = u
        costs[t] = stage_cost(xs[t], u, Q, R)
        xs[t + 1] = A @ xs[t] + B @ u + E @ disturbances[t]
        viol[t] = violation(xs[t + 1], system.X)
        uviol[t] = violation(u, system.U)
    return Trajectory(xs, us, disturbances, costs, viol, uviol, fb)
