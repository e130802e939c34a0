"""Controllers: the gauge-filtered safe policy, the linear baseline and the soft-penalty baseline.

The safe policy computes, for a state ``x`` strictly inside S::

    v = psi(x)                          # virtual action in the unit inf-ball
    u = G(v | Omega(x) - K x) + K x     # closed-form safety filter

``Omega(x) - K x = {w : F w <= h0 - M x}`` has a state-independent row
matrix ``F``; only the right-hand side is assembled per state, so one call
costs a network forward pass, two small mat-vecs and a max.
"""

from __future__ import annotations

import numpy as np

from gaugerl.config import TOL
from gaugerl.errors import CertificateInvalid, DimensionMismatch, NonBoxInputSet, StateOutsideS
from gaugerl.invariance import RciCertificate, SafetySystem, shifted_safe_action_set, verify_certificate
from gaugerl.nn import Mlp, backward, forward, predict
from gaugerl.polytope import HPolytope


def violation(x, X: HPolytope) -> float:
    """Total (1-norm) constraint violation of ``x`` w.r.t. ``X``; zero iff ``x`` in ``X``.

    For symmetric ``X = {-xb <= V x <= xb}`` this is
    ``|| max(V x - xb, 0) - min(V x + xb, 0) ||_1``.
    """
    x = np.asarray(x, dtype=float)
    return float(np.maximum(X.F @ x - X.g, 0.0).sum())


def act_linear(K, x) -> np.ndarray:
    return np.asarray(K) @ np.asarray(x, dtype=float)


class LinearPolicy:
    def __init__(self, K):
        self.K = np.array(K, dtype=float, ndmin=2)
        self.last_fallback = False

    def __call__(self, x):
        return self.K @ x


class SafePolicy:
    """Network ``psi`` composed with the gauge-map safety filter of certificate ``cert``."""

    def __init__(self, psi: Mlp, cert: RciCertificate, system: SafetySystem, verify: bool = True):
        if psi.widths[-1] != system.m or psi.widths[0] != system.n:
            raise DimensionMismatch("psi must map R^n to R^m")
        if psi.output != "saturating":
            raise ValueError("psi needs the saturating output head to land in the unit inf-ball")
        if verify:
            report = verify_certificate(cert, system)
            if not report.valid:
                raise CertificateInvalid(f"certificate fails verification: {report.violations()}")
        self.psi = psi
        self.cert = cert
        self.system = system
        self.K = np.array(cert.K)
        VB = cert.Vs @ system.B
        VAcl = cert.Vs @ (system.A + system.B @ cert.K)
        F = np.vstack([system.U.F, VB, -VB])
        h0 = np.concatenate([system.U.g, cert.s_bar - cert.tighten_hi, cert.s_bar + cert.tighten_lo])
        Mx = np.vstack([system.U.F @ cert.K, VAcl, -VAcl])
        norms = np.abs(F).max(axis=1)
        live = norms > 1e-14 * max(1.0, norms.max())
        self.F = np.ascontiguousarray(F[live])
        self.h0 = h0[live]
        self.Mx = np.ascontiguousarray(Mx[live])
        self.Vs = np.ascontiguousarray(cert.Vs)
        self.s_bar = np.array(cert.s_bar)
        self.inv_s_bar = 1.0 / self.s_bar
        # one stacked mat-vec gives V_s x, M x and K x
        self._nv, self._nr = self.Vs.shape[0], self.F.shape[0]
        self._stack = np.ascontiguousarray(np.vstack([self.Vs, self.Mx, self.K]))
        self._outside = -TOL.safety_membership * float(self.inv_s_bar.max())
        self.last_fallback = False
        self.fallback_count = 0

    def omega_hat(self, x) -> HPolytope:
        """Shifted safe action set at ``x`` built by the invariance module (reference path)."""
        return shifted_safe_action_set(self.cert, self.system, x)

    def __call__(self, x):
        return act_safe(self, x)

    def margin(self, x) -> float:
        return float(np.min((self.s_bar - np.abs(self.Vs @ x)) * self.inv_s_bar))


def _filter(p: SafePolicy, x, v):
    """Return ``(u, fallback)`` for virtual action ``v`` at state ``x``."""
    z = p._stack @ x
    nv, nr = p._nv, p._nr
    Kx = z[nv + nr:]
    margin = ((p.s_bar - np.abs(z[:nv])) * p.inv_s_bar).min()
    if margin < TOL.interior_eps:
        if margin < p._outside:
            raise StateOutsideS(f"state outside S (relative margin {margin:.3e})")
        return Kx, True
    g = p.h0 - z[nv:nv + nr]
    if g.min() <= TOL.strict_interior:
        return Kx, True
    norm = np.abs(v).max()
    if norm == 0.0:
        return Kx, False
    return (norm / ((p.F @ v) / g).max()) * v + Kx, False


def act_safe(p: SafePolicy, x, v=None) -> np.ndarray:
    """Safe action at ``x``; ``v`` overrides the network's virtual action (exploration)."""
    x = np.asarray(x, dtype=float)
    if v is None:
        v = predict(p.psi, x)
    u, fb = _filter(p, x, v)
    p.last_fallback = fb
    p.fallback_count += fb
    return u


def gauge_jacobian_branch(v, F, g):
    """Tie-broken branch pieces of ``G(v | {w : F w <= g})`` for a batch.

    Returns ``(scale, grad)`` with ``G(v) = scale * v`` and
    ``dG/dv = scale * I + outer(v, grad)``. Zero rows of ``v`` use the branch
    selected at ``e_1`` (the limit along that ray).
    """
    v = np.atleast_2d(v)
    B, m = v.shape
    vj = v.copy()
    zero = ~np.any(v != 0.0, axis=1)
    vj[zero] = 0.0
    vj[zero, 0] = 1.0
    a = np.argmax(np.abs(vj), axis=1)
    rows = np.arange(B)
    sigma = np.sign(vj[rows, a])
    norm = sigma * vj[rows, a]
    ratios = (vj @ F.T) / g
    i = np.argmax(ratios, axis=1)
    q = ratios[rows, i]
    gi = g[rows, i] if g.ndim == 2 else g[i]
    grad = -(norm / (q * q * gi))[:, None] * F[i]
    grad[rows, a] += sigma / q
    scale = norm / q
    return scale, grad


def act_safe_batch(p: SafePolicy, X, V=None):
    """Batched safe actions. Returns ``(U, cache)`` for :func:`act_safe_backward_batch`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if V is None:
        V, net_cache = forward(p.psi, X)
    else:
        net_cache = None
    V = np.atleast_2d(V)
    KX = X @ p.K.T
    margin = np.min((p.s_bar - np.abs(X @ p.Vs.T)) * p.inv_s_bar, axis=1)
    if np.any(margin < -TOL.safety_membership * float(np.max(p.inv_s_bar))):
        raise StateOutsideS("batch contains states outside S")
    G = p.h0 - X @ p.Mx.T
    active = (margin >= TOL.interior_eps) & (G.min(axis=1) > TOL.strict_interior)
    U = KX.copy()
    scale = np.zeros(X.shape[0])
    grad = np.zeros_like(V)
    if np.any(active):
        s, gr = gauge_jacobian_branch(V[active], p.F, G[active])
        nonzero = np.any(V[active] != 0.0, axis=1)
        U[active] += np.where(nonzero[:, None], s[:, None] * V[active], 0.0)
        scale[active] = s
        grad[active] = gr
    return U, (net_cache, V, scale, grad, active)


def act_safe_backward_batch(p: SafePolicy, cache, dL_dU):
    """Parameter gradients of ``sum(dL_dU * U)`` w.r.t. ``psi``; fallback rows contribute nothing."""
    net_cache, V, scale, grad, active = cache
    if net_cache is None:
        raise ValueError("virtual actions were supplied externally; no network cache to differentiate")
    dL_dU = np.atleast_2d(dL_dU)
    # J^T g = scale * g + grad * (v . g)
    dL_dV = scale[:, None] * dL_dU + grad * np.sum(V * dL_dU, axis=1, keepdims=True)
    dL_dV[~active] = 0.0
    param_grads, _ = backward(p.psi, net_cache, dL_dV)
    return param_grads


def act_safe_backward(p: SafePolicy, x, dL_dU):
    """Gradient w.r.t. ``psi`` parameters of ``dL_dU . act_safe(p, x)`` (single state)."""
    x = np.asarray(x, dtype=float)
    U, cache = act_safe_batch(p, x[None, :])
    grads = act_safe_backward_batch(p, cache, np.asarray(dL_dU, dtype=float)[None, :])
    return grads


class PenaltyPolicy:
    """Unfiltered network whose saturating head is rescaled onto the box ``U``.

    With ``K`` given the head acts as a residual on the linear policy,
    ``u = clip_U(K x + half * y)``, so training starts from the same
    stabilizing feedback as the safe policy; nothing keeps the state in X.
    """

    def __init__(self, net: Mlp, U: HPolytope, lam: float = 10.0, K=None):
        box = U.box_bounds()
        if box is None:
            raise NonBoxInputSet("the penalty baseline needs an axis-aligned box input set")
        if net.output != "saturating":
            raise ValueError("penalty network needs the saturating output head")
        lo, hi = box
        self.net = net
        self.lo, self.hi = lo, hi
        self.center = 0.5 * (lo + hi)
        self.half = 0.5 * (hi - lo)
        self.lam = lam
        self.K = None if K is None else np.array(K, dtype=float, ndmin=2)
        if self.K is not None and self.K.shape != (lo.size, net.widths[0]):
            raise DimensionMismatch("prior gain must be m x n")
        self.last_fallback = False

    def __call__(self, x):
        return act_penalty(self, x)

    def from_output(self, y, x=None):
        """Action for head output ``y`` at state(s) ``x``; returns ``(u, unclipped_mask)``."""
        if self.K is None:
            u = self.center + self.half * y
            return u, np.ones(np.shape(u), dtype=bool)
        raw = x @ self.K.T + self.half * y
        u = np.minimum(np.maximum(raw, self.lo), self.hi)
        return u, (raw > self.lo) & (raw < self.hi)


def act_penalty(p: PenaltyPolicy, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return p.from_output(predict(p.net, x), x)[0]

