import numpy as np
import pytest

import gaugerl.ddpg as ddpg
from gaugerl.ddpg import (
    Environment,
    ReplayBuffer,
    TrainConfig,
    Transition,
    actor_update,
    critic_update,
    evaluate,
    make_agent,
    train,
)
from gaugerl.errors import CertificateInvalid, TrainingAborted
from gaugerl.invariance import SafetySystem, gain_search
from gaugerl.nn import Mlp, forward, predict
from gaugerl.plant import rollout, sample_uniform_polytope, stage_cost
from gaugerl.policy import act_safe, act_safe_batch
from gaugerl.polytope import HPolytope
from oracles import central_diff

SMALL = dict(hidden=(16, 16), warmup=32, batch_size=16, actor_delay=0, buffer_capacity=1000)


@pytest.fixture(scope="module")
def scalar_env():
    sysm = SafetySystem([[0.9]], [[1.0]], [[1.0]], U=HPolytope.box([0.3]), D=HPolytope.box([0.1]),
                        X=HPolytope.box([1.0]))
    cert = gain_search(sysm, [np.array([[-0.2]]), np.array([[-0.5]])]).certificate
    return Environment(sysm, cert, [[1.0]], [[0.5]], alpha=0.5)


@pytest.fixture(scope="module")
def grid_env(grid_case, grid_system, grid_cert):
    return Environment(grid_system, grid_cert, grid_case.Q, grid_case.R, grid_case.alpha, np.arange(grid_case.N))


def tr(k, n=2, m=1):
    return Transition(np.full(n, k), np.full(m, k), float(k), np.full(n, k + 1.0), False, 0.0)


# replay buffer

def test_buffer_fifo():
    buf = ReplayBuffer(3, 2, 1)
    for k in range(5):
        buf.add(tr(float(k)))
    assert len(buf) == 3
    assert sorted(buf.cost.tolist()) == [2.0, 3.0, 4.0]


def test_buffer_samples_without_replacement(rng):
    buf = ReplayBuffer(10, 2, 1)
    for k in range(10):
        buf.add(tr(float(k)))
    X, U, c, Xn, done, viol = buf.sample(10, rng)
    assert sorted(c.tolist()) == list(map(float, range(10)))
    np.testing.assert_array_equal(X[:, 0], c)
    np.testing.assert_array_equal(Xn[:, 0], c + 1)
    with pytest.raises(ValueError):
        buf.sample(11, rng)


def test_transition_rejects_nonfinite():
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.zeros(1), float("nan"), np.zeros(2), False, 0.0)


def test_config_roundtrip_and_validation():
    c = TrainConfig(episodes=3, hidden=(8, 8))
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"episode": 3})
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)


# critic

def batch_from(env, agent, rng, size=64):
    X = sample_uniform_polytope(env.cert.S, rng, size)
    U, _ = act_safe_batch(agent.policy, X)
    U = U + 0.01 * rng.standard_normal(U.shape)
    U = np.clip(U, -0.3, 0.3)
    c = np.array([stage_cost(x, u, env.Q, env.R) for x, u in zip(X, U)])
    Xn = sample_uniform_polytope(env.cert.S, rng, size)
    return X, U, c, Xn, np.zeros(size, dtype=bool), np.zeros(size)


def test_critic_regression_decreases(scalar_env, rng):
    agent = make_agent(scalar_env, "safe", TrainConfig(**SMALL), rng)
    batch = batch_from(scalar_env, agent, rng)
    first = critic_update(agent, batch, 0.0)
    for _ in range(500):
        last = critic_update(agent, batch, 0.0)
    assert last < 0.05 * first


def test_critic_fixed_point_of_repeated_transition(scalar_env, rng):
    agent = make_agent(scalar_env, "safe", TrainConfig(**SMALL), rng)
    x = np.array([[0.1]])
    u = act_safe_batch(agent.policy, x)[0]
    batch = (x, u, np.array([1.0]), x, np.array([False]), np.array([0.0]))
    for _ in range(3000):
        critic_update(agent, batch, 0.5)
        agent.critic_target = agent.critic.copy()
    q = predict(agent.critic, np.hstack([x, u]))[0, 0]
    assert q == pytest.approx(2.0, abs=0.02)


def capture_grads(monkeypatch):
    seen = []

    def fake_step(state, params, grads):
        seen.append([g.copy() for g in grads])
        return params, state

    monkeypatch.setattr(ddpg, "adam_step", fake_step)
    return seen


def test_critic_gradient_matches_finite_differences(scalar_env, rng, monkeypatch):
    agent = make_agent(scalar_env, "safe", TrainConfig(hidden=(6, 6)), rng)
    batch = batch_from(scalar_env, agent, rng, 8)
    seen = capture_grads(monkeypatch)
    critic_update(agent, batch, 0.9)
    X, U, c, Xn, _, _ = batch
    Un, _ = act_safe_batch(agent.policy_target, Xn)
    y = c + 0.9 * predict(agent.critic_target, np.hstack([Xn, Un]))[:, 0]
    theta = agent.critic.flat()

    def loss(t):
        agent.critic.set_flat(t)
        return float(np.mean((forward(agent.critic, np.hstack([X, U]))[0][:, 0] - y) ** 2))

    fd = central_diff(loss, theta.copy(), h=1e-6)[0]
    agent.critic.set_flat(theta)
    an = np.concatenate([g.ravel() for g in seen[0]])
    assert np.linalg.norm(an - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))


# actor

def linear_critic(n, m, c):
    W = np.concatenate([np.zeros(n), c])[None, :]
    return Mlp([W], [np.zeros(1)], "identity")


def test_constant_critic_gives_zero_actor_gradient(scalar_env, rng, monkeypatch):
    agent = make_agent(scalar_env, "safe", TrainConfig(**SMALL), rng)
    agent.critic = Mlp([np.zeros((1, 2))], [np.array([3.0])], "identity")
    seen = capture_grads(monkeypatch)
    actor_update(agent, batch_from(scalar_env, agent, rng))
    assert all(np.all(g == 0.0) for g in seen[0])


@pytest.mark.parametrize("kind", ["safe", "penalty"])
def test_actor_descends_linear_critic(grid_env, rng, kind):
    cfg = TrainConfig(hidden=(32, 32), lr_actor=1e-3)
    agent = make_agent(grid_env, kind, cfg, rng)
    c = np.array([1.0, -1.0, 0.5])
    agent.critic = linear_critic(6, 3, c)
    X = sample_uniform_polytope(grid_env.cert.S.scaled(0.8), rng, 64)
    batch = (X, None, None, None, None, None)
    before = float(np.mean(ddpg._batch_actions(agent, X, False)[0] @ c))
    for _ in range(20):
        actor_update(agent, batch)
    after = float(np.mean(ddpg._batch_actions(agent, X, False)[0] @ c))
    assert after < before


@pytest.mark.parametrize("kind", ["safe", "penalty"])
def test_actor_gradient_matches_finite_differences(grid_env, rng, monkeypatch, kind):
    cfg = TrainConfig(hidden=(5, 5))
    agent = make_agent(grid_env, kind, cfg, rng)
    # make the actor output non-trivial so the gradient is not dominated by round-off
    agent.actor.weights[-1] *= 100.0
    X = sample_uniform_polytope(grid_env.cert.S.scaled(0.8), rng, 8)
    seen = capture_grads(monkeypatch)
    actor_update(agent, (X, None, None, None, None, None))
    theta = agent.actor.flat()

    def obj(t):
        agent.actor.set_flat(t)
        U = ddpg._batch_actions(agent, X, False)[0]
        return float(np.mean(predict(agent.critic, np.hstack([X, U]))))

    fd = central_diff(obj, theta.copy(), h=1e-6)[0]
    agent.actor.set_flat(theta)
    an = np.concatenate([g.ravel() for g in seen[0]])
    assert np.linalg.norm(an - fd) <= 1e-4 * max(1e-8, np.linalg.norm(fd))


# training loop

def test_single_step_run_logs_stage_cost(grid_env):
    cfg = TrainConfig(episodes=1, steps_per_episode=1, noise_sigma=0.0, **SMALL)
    rep = train(grid_env, "safe", cfg)
    assert len(rep.rows) == 1 and rep.updates == 0
    agent = make_agent(grid_env, "safe", cfg, np.random.default_rng([cfg.seed, 0]))
    x0 = sample_uniform_polytope(grid_env.initial_region(cfg.x0_scale), np.random.default_rng([cfg.seed, 1]), 1)[0]
    u0 = act_safe(agent.policy, x0)
    assert rep.rows[0]["accum_cost"] == pytest.approx(stage_cost(x0, u0, grid_env.Q, grid_env.R), rel=1e-12)


def test_short_safe_run_has_no_violations_and_is_deterministic(grid_env):
    cfg = TrainConfig(episodes=4, steps_per_episode=40, **SMALL)
    a = train(grid_env, "safe", cfg)
    b = train(grid_env, "safe", cfg)
    assert a.total_violations == 0
    assert a.updates > 0
    np.testing.assert_array_equal(a.costs, b.costs)
    np.testing.assert_array_equal(a.agent.actor.flat(), b.agent.actor.flat())
    c = train(grid_env, "safe", TrainConfig(episodes=4, steps_per_episode=40, seed=1, **SMALL))
    assert not np.array_equal(a.costs, c.costs)


def test_penalty_run_completes(grid_env):
    rep = train(grid_env, "penalty", TrainConfig(episodes=3, steps_per_episode=30, **SMALL))
    assert len(rep.rows) == 3 and np.all(np.isfinite(rep.costs))
    s = rep.summary()
    assert s["kind"] == "penalty" and s["total_violations"] == rep.total_violations


def test_safe_run_requires_certificate(grid_env):
    env = Environment(grid_env.system, None, grid_env.Q, grid_env.R, grid_env.alpha)
    with pytest.raises(CertificateInvalid):
        train(env, "safe", TrainConfig(episodes=1, steps_per_episode=1))


def test_nan_guard_aborts(scalar_env):
    cfg = TrainConfig(episodes=3, steps_per_episode=40, lr_critic=float("nan"), **SMALL)
    with pytest.raises(TrainingAborted):
        train(scalar_env, "penalty", cfg)


def test_report_csv(tmp_path, scalar_env):
    rep = train(scalar_env, "safe", TrainConfig(episodes=2, steps_per_episode=5, **SMALL))
    path = tmp_path / "t.csv"
    rep.to_csv(path, "h")
    lines = path.read_text().splitlines()
    assert lines[0] == "# h" and lines[1] == "episode,accum_cost,max_angle_dev,violations,wallclock_s"
    assert len(lines) == 4


# evaluation

def test_paired_eval_identical_for_same_policy(grid_env):
    lin = grid_env.linear_policy()
    rep = evaluate({"a": lin, "b": lin}, grid_env, n_episodes=10, steps=30, seed=4)
    np.testing.assert_array_equal(rep.costs["a"], rep.costs["b"])
    p = rep.paired("a", "b")
    assert p["mean_diff"] == 0.0 and p["n"] == 10


def test_eval_counts_match_independent_rollouts(scalar_env):
    def pusher(x):
        return np.array([0.3])

    rep = evaluate({"push": pusher, "lin": scalar_env.linear_policy()}, scalar_env, n_episodes=5, steps=40, seed=2)
    x0s, dists = ddpg.evaluation_episodes(scalar_env, 5, 40, 2)
    for i in range(5):
        t = rollout(pusher, scalar_env.system, None, x0s[i], 40, Q=scalar_env.Q, R=scalar_env.R,
                    disturbances=dists[i])
        assert rep.violations["push"][i] == t.num_violations
        assert rep.costs["push"][i] == pytest.approx(t.total_cost, rel=1e-12)
    assert rep.violations["push"].sum() > 0
    assert rep.violations["lin"].sum() == 0
    s = rep.summary()
    assert s["policies"]["push"]["violations"] == int(rep.violations["push"].sum())


def test_eval_streams_shared_and_seeded(grid_env):
    a = ddpg.evaluation_episodes(grid_env, 3, 20, 9)
    b = ddpg.evaluation_episodes(grid_env, 3, 20, 9)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert np.all(a[1] @ grid_env.system.D.F.T <= grid_env.system.D.g + 1e-15)
