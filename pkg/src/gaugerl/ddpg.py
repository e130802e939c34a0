"""DDPG training for the safe (gauge-filtered) actor and the soft-penalty baseline, plus paired evaluation.

Cost semantics throughout: the critic estimates discounted accumulated cost
and the actor descends it.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from gaugerl.config import TOL
from gaugerl.errors import CertificateInvalid, DimensionMismatch, TrainingAborted
from gaugerl.invariance import RciCertificate, SafetySystem, verify_certificate
from gaugerl.nn import AdamState, Mlp, adam_step, backward, forward, init_mlp, predict, soft_update
from gaugerl.plant import DisturbanceModel, disturbance_sequence, sample_uniform_polytope, stage_cost
from gaugerl.polytope import support
from gaugerl.policy import (
    LinearPolicy,
    PenaltyPolicy,
    SafePolicy,
    act_safe,
    act_safe_backward_batch,
    act_safe_batch,
    violation,
)

logger = logging.getLogger(__name__)

# seed streams, so that changing one consumer never shifts another's draws
_STREAM_INIT, _STREAM_X0, _STREAM_DIST, _STREAM_NOISE, _STREAM_REPLAY = range(5)


@dataclass
class Transition:
    x: np.ndarray
    u: np.ndarray
    cost: float
    x_next: np.ndarray
    done: bool
    violation: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.x_next))
                and np.isfinite(self.cost) and np.isfinite(self.violation)):
            raise ValueError("transition entries must be finite")


class ReplayBuffer:
    """Fixed-capacity FIFO store; batches are drawn uniformly without replacement."""

    def __init__(self, capacity: int, n: int, m: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.x = np.zeros((capacity, n))
        self.u = np.zeros((capacity, m))
        self.cost = np.zeros(capacity)
        self.x_next = np.zeros((capacity, n))
        self.done = np.zeros(capacity, dtype=bool)
        self.violation = np.zeros(capacity)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        i = self._next
        self.x[i], self.u[i], self.cost[i] = tr.x, tr.u, tr.cost
        self.x_next[i], self.done[i], self.violation[i] = tr.x_next, tr.done, tr.violation
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        if batch > self.size:
            raise ValueError(f"batch {batch} exceeds buffer size {self.size}")
        idx = rng.choice(self.size, size=batch, replace=False)
        return self.x[idx], self.u[idx], self.cost[idx], self.x_next[idx], self.done[idx], self.violation[idx]


@dataclass
class TrainConfig:
    episodes: int = 200
    steps_per_episode: int = 100
    batch_size: int = 64
    buffer_capacity: int = 100_000
    gamma: float = 0.99
    rho: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    noise_sigma: float = 0.1
    noise_sigma_final: float = 0.0
    penalty_lambda: float = 10.0
    penalty_prior_gain: bool = True
    seed: int = 0
    warmup: int = 1000
    actor_delay: int = 2000
    hidden: tuple = (256, 256)
    steepness: float = 1.0
    cost_scale: float = 1.0
    bootstrap_on_timeout: bool = True
    x0_scale: float = 0.5

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episodes and steps_per_episode must be at least 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if not 0.0 < self.x0_scale <= 1.0:
            raise ValueError("x0_scale must lie in (0, 1]")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Environment:
    """Everything a run needs besides the networks: dynamics, sets, cost and disturbance law."""

    system: SafetySystem
    cert: RciCertificate | None
    Q: np.ndarray
    R: np.ndarray
    alpha: float
    angle_idx: np.ndarray = field(default_factory=lambda: np.array([0]))

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        self.Q = np.array(self.Q, dtype=float, ndmin=2)
        self.R = np.array(self.R, dtype=float, ndmin=2)
        if self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise DimensionMismatch("cost weights do not match the system dimensions")
        self.angle_idx = np.atleast_1d(np.asarray(self.angle_idx, dtype=int))

    def disturbance_model(self, seed: int) -> DisturbanceModel:
        return DisturbanceModel(self.alpha, self.system.D, seed)

    def initial_region(self, scale: float):
        if self.cert is None:
            return self.system.X.scaled(scale)
        return self.cert.S.scaled(scale)

    def linear_policy(self) -> LinearPolicy:
        if self.cert is None:
            raise CertificateInvalid("no certificate attached to this environment")
        return LinearPolicy(self.cert.K)


def _box_halfwidths(P) -> np.ndarray:
    """Half-widths of the bounding box of ``P``; used to normalize network inputs."""
    return np.array([0.5 * (support(P, e) + support(P, -e)) for e in np.eye(P.dim)])


@dataclass
class Agent:
    kind: str
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    actor_opt: AdamState
    critic_opt: AdamState
    policy: SafePolicy | PenaltyPolicy
    policy_target: SafePolicy | PenaltyPolicy


def make_agent(env: Environment, kind: str, config: TrainConfig, rng: np.random.Generator) -> Agent:
    sys = env.system
    n, m = sys.n, sys.m
    if kind not in ("safe", "penalty"):
        raise ValueError(f"unknown policy kind {kind!r}")
    if kind == "safe" and env.cert is None:
        raise CertificateInvalid("safe training needs a certificate")
    if env.cert is not None:
        # operating region: S for states, the range of K x over S for actions
        S = env.cert.S
        state_scale = _box_halfwidths(S)
        u_scale = np.array([max(support(S, k), 1e-3 * h) for k, h in zip(env.cert.K, _box_halfwidths(sys.U))])
    else:
        state_scale = _box_halfwidths(sys.X)
        u_scale = _box_halfwidths(sys.U)
    widths = [n, *config.hidden, m]
    actor = init_mlp(widths, rng, "saturating", config.steepness, 0.01, in_scale=state_scale)
    critic = init_mlp([n + m, *config.hidden, 1], rng, "identity", 1.0, 1.0,
                      in_scale=np.concatenate([state_scale, u_scale]))
    actor_t, critic_t = actor.copy(), critic.copy()
    if kind == "safe":
        policy = SafePolicy(actor, env.cert, sys)
        policy_t = SafePolicy(actor_t, env.cert, sys, verify=False)
    else:
        K = env.cert.K if (config.penalty_prior_gain and env.cert is not None) else None
        policy = PenaltyPolicy(actor, sys.U, config.penalty_lambda, K)
        policy_t = PenaltyPolicy(actor_t, sys.U, config.penalty_lambda, K)
    return Agent(kind, actor, critic, actor_t, critic_t,
                 AdamState.for_params(actor.params, config.lr_actor),
                 AdamState.for_params(critic.params, config.lr_critic), policy, policy_t)


def _batch_actions(agent: Agent, X, target: bool):
    """Deterministic actions for a batch, with the cache the actor gradient needs."""
    pol = agent.policy_target if target else agent.policy
    if agent.kind == "safe":
        return act_safe_batch(pol, X)
    y, cache = forward(pol.net, X)
    U, mask = pol.from_output(y, X)
    return U, (cache, mask)


def critic_update(agent: Agent, batch, gamma: float, bootstrap_on_timeout: bool = True) -> float:
    """One Adam step on the mean squared TD error; returns the loss before the step."""
    X, U, c, Xn, done, _ = batch
    if len(X) == 0:
        raise ValueError("empty batch")
    Un, _ = _batch_actions(agent, Xn, target=True)
    q_next = predict(agent.critic_target, np.hstack([Xn, Un]))[:, 0]
    cont = np.ones_like(c) if bootstrap_on_timeout else (~done).astype(float)
    y = c + gamma * cont * q_next
    q, cache = forward(agent.critic, np.hstack([X, U]))
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    grads, _ = backward(agent.critic, cache, (2.0 / len(err)) * err[:, None])
    adam_step(agent.critic_opt, agent.critic.params, grads)
    return loss


def actor_update(agent: Agent, batch) -> float:
    """One Adam step on ``mean Q(x, pi(x))``; returns the loss before the step."""
    X = batch[0]
    if len(X) == 0:
        raise ValueError("empty batch")
    m = agent.policy.psi.widths[-1] if agent.kind == "safe" else agent.policy.net.widths[-1]
    U, pcache = _batch_actions(agent, X, target=False)
    q, ccache = forward(agent.critic, np.hstack([X, U]))
    _, in_grad = backward(agent.critic, ccache, np.full_like(q, 1.0 / len(q)))
    dU = in_grad[:, -m:]
    if agent.kind == "safe":
        grads = act_safe_backward_batch(agent.policy, pcache, dU)
    else:
        cache, mask = pcache
        grads, _ = backward(agent.policy.net, cache, dU * agent.policy.half * mask)
    adam_step(agent.actor_opt, agent.actor.params, grads)
    return float(np.mean(q))


@dataclass
class TrainingReport:
    kind: str
    config: TrainConfig
    rows: list[dict]
    agent: Agent
    wallclock_s: float
    updates: int
    fallbacks: int
    critic_losses: list[float] = field(default_factory=list)

    CSV_FIELDS = ("episode", "accum_cost", "max_angle_dev", "violations", "wallclock_s")

    @property
    def costs(self) -> np.ndarray:
        return np.array([r["accum_cost"] for r in self.rows])

    @property
    def total_violations(self) -> int:
        return int(sum(r["violations"] for r in self.rows))

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            for r in self.rows:
                w.writerow([r["episode"], repr(r["accum_cost"]), repr(r["max_angle_dev"]), r["violations"],
                            f"{r['wallclock_s']:.3f}"])

    def summary(self) -> dict:
        c = self.costs
        k = min(20, len(c))
        return {
            "kind": self.kind,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "episodes": len(self.rows),
            "updates": self.updates,
            "total_violations": self.total_violations,
            "fallbacks": self.fallbacks,
            "mean_cost_first": float(c[:k].mean()),
            "mean_cost_last": float(c[-k:].mean()),
            "wallclock_s": self.wallclock_s,
        }


def _check_finite(agent: Agent, where: str) -> None:
    for name, net in (("actor", agent.actor), ("critic", agent.critic)):
        if not all(np.all(np.isfinite(p)) for p in net.params):
            raise TrainingAborted(f"non-finite {name} parameters after {where}")


def train(env: Environment, kind: str, config: TrainConfig | None = None, progress=None) -> TrainingReport:
    """Run DDPG for ``config.episodes`` fixed-length episodes.

    Safe runs explore in virtual-action space and assert that every visited
    state stays in S; penalty runs add ``lambda * violation(x_next)`` to the
    training cost (the logged cost excludes it).
    """
    config = config or TrainConfig()
    sys = env.system
    if kind == "safe":
        if env.cert is None:
            raise CertificateInvalid("safe training needs a certificate")
        report = verify_certificate(env.cert, sys)
        if not report.valid:
            raise CertificateInvalid(f"certificate fails verification: {report.violations()}")
    seed = config.seed
    init_rng = np.random.default_rng([seed, _STREAM_INIT])
    x0_rng = np.random.default_rng([seed, _STREAM_X0])
    dist_rng = np.random.default_rng([seed, _STREAM_DIST])
    noise_rng = np.random.default_rng([seed, _STREAM_NOISE])
    replay_rng = np.random.default_rng([seed, _STREAM_REPLAY])
    agent = make_agent(env, kind, config, init_rng)
    model = env.disturbance_model(seed)
    buf = ReplayBuffer(config.buffer_capacity, sys.n, sys.m)
    region = env.initial_region(config.x0_scale)
    S = env.cert.S if kind == "safe" else None
    A, B, E = sys.A, sys.B, sys.E
    total_steps = config.episodes * config.steps_per_episode
    rows, losses = [], []
    updates = 0
    step_count = 0
    start = time.perf_counter()
    pol = agent.policy
    pol_fallbacks = 0
    for ep in range(config.episodes):
        x = sample_uniform_polytope(region, x0_rng, 1)[0]
        ds = disturbance_sequence(model, config.steps_per_episode, dist_rng)
        accum, max_dev, n_viol = 0.0, float(np.max(np.abs(x[env.angle_idx]))), 0
        for t in range(config.steps_per_episode):
            frac = step_count / max(1, total_steps - 1)
            sigma = config.noise_sigma + frac * (config.noise_sigma_final - config.noise_sigma)
            if kind == "safe":
                v = predict(pol.psi, x)
                v = np.clip(v + sigma * noise_rng.standard_normal(v.shape), -1.0, 1.0)
                u = act_safe(pol, x, v)
                pol_fallbacks += pol.last_fallback
            else:
                y = predict(pol.net, x)
                y = np.clip(y + sigma * noise_rng.standard_normal(y.shape), -1.0, 1.0)
                u = pol.from_output(y, x)[0]
            x_next = A @ x + B @ u + E @ ds[t]
            cost = stage_cost(x, u, env.Q, env.R)
            viol = violation(x_next, sys.X)
            if not np.isfinite(cost) or not np.all(np.isfinite(x_next)):
                raise TrainingAborted(f"non-finite state or cost at episode {ep}, step {t}")
            if kind == "safe" and np.any(S.F @ x_next > S.g + TOL.safety_membership):
                raise TrainingAborted(f"safe run left S at episode {ep}, step {t}: {x_next.tolist()}")
            train_cost = cost + (config.penalty_lambda * viol if kind == "penalty" else 0.0)
            done = t == config.steps_per_episode - 1
            buf.add(Transition(x, u, config.cost_scale * train_cost, x_next, done, viol))
            accum += cost
            n_viol += viol > 0.0
            max_dev = max(max_dev, float(np.max(np.abs(x_next[env.angle_idx]))))
            step_count += 1
            if len(buf) >= max(config.warmup, config.batch_size):
                batch = buf.sample(config.batch_size, replay_rng)
                loss = critic_update(agent, batch, config.gamma, config.bootstrap_on_timeout)
                soft_update(agent.critic_target, agent.critic, config.rho)
                if updates >= config.actor_delay:
                    actor_update(agent, batch)
                    soft_update(agent.actor_target, agent.actor, config.rho)
                updates += 1
                if not np.isfinite(loss):
                    raise TrainingAborted(f"non-finite critic loss at episode {ep}, step {t}")
                losses.append(loss)
            x = x_next
        _check_finite(agent, f"episode {ep}")
        if kind == "safe" and n_viol:
            raise TrainingAborted(f"safe run recorded {n_viol} violations in episode {ep}")
        rows.append({"episode": ep, "accum_cost": accum, "max_angle_dev": max_dev, "violations": int(n_viol),
                     "wallclock_s": time.perf_counter() - start})
        if progress is not None:
            progress(rows[-1])
    return TrainingReport(kind, config, rows, agent, time.perf_counter() - start, updates, pol_fallbacks, losses)


@dataclass
class EvalReport:
    names: list[str]
    costs: dict[str, np.ndarray]
    violations: dict[str, np.ndarray]
    action_violations: dict[str, np.ndarray]
    max_angle_dev: dict[str, np.ndarray]
    fallbacks: dict[str, np.ndarray]
    seed: int
    steps: int

    @property
    def n_episodes(self) -> int:
        return len(self.costs[self.names[0]])

    def paired(self, a: str, b: str) -> dict:
        """Paired statistics of ``cost[a] - cost[b]`` (negative means ``a`` is cheaper)."""
        diff = self.costs[a] - self.costs[b]
        n = diff.size
        se = float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        return {"a": a, "b": b, "mean_diff": float(diff.mean()), "se": se, "n": int(n)}

    def summary(self) -> dict:
        out = {"seed": self.seed, "episodes": self.n_episodes, "steps": self.steps, "policies": {}}
        for k in self.names:
            out["policies"][k] = {
                "mean_cost": float(self.costs[k].mean()),
                "violations": int(self.violations[k].sum()),
                "action_violations": int(self.action_violations[k].sum()),
                "max_angle_dev": float(self.max_angle_dev[k].max()),
                "fallbacks": int(self.fallbacks[k].sum()),
            }
        out["paired"] = [self.paired(a, b) for i, a in enumerate(self.names) for b in self.names[i + 1:]]
        return out

    def to_csv(self, path, header_comment: str | None = None) -> None:
        """One row per (episode, policy): accumulated cost per trajectory and its violation counts."""
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["episode", "policy", "accum_cost", "max_angle_dev", "violations", "action_violations",
                        "fallbacks"])
            for i in range(self.n_episodes):
                for k in self.names:
                    w.writerow([i, k, repr(float(self.costs[k][i])), repr(float(self.max_angle_dev[k][i])),
                                int(self.violations[k][i]), int(self.action_violations[k][i]),
                                int(self.fallbacks[k][i])])


def evaluation_episodes(env: Environment, n_episodes: int, steps: int, seed: int, x0_scale: float = 0.5):
    """Shared initial states and disturbance sequences, one generator per episode."""
    region = env.initial_region(x0_scale)
    model = env.disturbance_model(seed)
    x0_rng = np.random.default_rng([seed, _STREAM_X0, 1])
    x0s = sample_uniform_polytope(region, x0_rng, n_episodes)
    dists = np.stack([disturbance_sequence(model, steps, np.random.default_rng([seed, _STREAM_DIST, 1, i]))
                      for i in range(n_episodes)])
    return x0s, dists


def evaluate(policies: dict, env: Environment, n_episodes: int = 100, seed: int = 0, steps: int = 100,
             x0_scale: float = 0.5) -> EvalReport:
    """Paired evaluation: every policy sees bitwise-identical initial states and disturbance streams."""
    if not policies:
        raise ValueError("no policies to evaluate")
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    x0s, dists = evaluation_episodes(env, n_episodes, steps, seed, x0_scale)
    sys = env.system
    A, B, E = sys.A, sys.B, sys.E
    names = list(policies)
    res = {key: {k: np.zeros(n_episodes) for k in names} for key in ("cost", "viol", "uviol", "dev", "fb")}
    for k, pol in policies.items():
        for i in range(n_episodes):
            x = x0s[i]
            cost, nv, nuv, nfb = 0.0, 0, 0, 0
            dev = float(np.max(np.abs(x[env.angle_idx])))
            for t in range(steps):
                u = np.asarray(pol(x), dtype=float)
                nfb += bool(getattr(pol, "last_fallback", False))
                cost += stage_cost(x, u, env.Q, env.R)
                x = A @ x + B @ u + E @ dists[i, t]
                nv += violation(x, sys.X) > 0.0
                nuv += violation(u, sys.U) > TOL.safety_membership
                dev = max(dev, float(np.max(np.abs(x[env.angle_idx]))))
            res["cost"][k][i], res["viol"][k][i], res["uviol"][k][i] = cost, nv, nuv
            res["dev"][k][i], res["fb"][k][i] = dev, nfb
    return EvalReport(names, res["cost"], res["viol"], res["uviol"], res["dev"], res["fb"], seed, steps)


def save_summary(path, summary: dict, header: dict | None = None) -> None:
    out = dict(header or {})
    out.update(summary)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
