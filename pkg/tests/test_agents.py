import numpy as np
import pytest

from churnlab.agents import (DQNConfig, DQNLearner, PPOConfig, ReplayBuffer, collect_rollout, compute_gae,
                             double_dqn_target, dqn_update, ppo_loss, ppo_update, prepare, td_loss_and_grad)
from churnlab.agents.ppo import normalize, value_loss_and_grad
from churnlab.churn import ChainState, ChurnConfig
from churnlab.envs import TaskRunner, make_task_sequence
from churnlab.errors import ConfigurationError, DimensionError
from churnlab.nn import MLPConfig, Network, forward, init_network, log_softmax
from churnlab.optim import Optimizer

from conftest import central_diff, rel_err


def brute_gae(r, v, ended, gamma, lam, bootstrap=0.0):
    """Sum_l (gamma lam)^l delta_{t+l}, truncated at the first episode end."""
    n = len(r)
    nxt = [bootstrap if t == n - 1 else v[t + 1] for t in range(n)]
    delta = [r[t] + gamma * nxt[t] * (0.0 if ended[t] else 1.0) - v[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, l = 0.0, 0
        while t + l < n:
            total += (gamma * lam) ** l * delta[t + l]
            if ended[t + l]:
                break
            l += 1
        adv.append(total)
    return np.array(adv)


def test_gae_three_step_example():
    r, v, d = [1.0, 1.0, 1.0], [0.5, 0.5, 0.5], [False, False, True]
    adv, ret = compute_gae(r, v, d, [False] * 3, 0.99, 0.95)
    assert np.allclose(adv, brute_gae(r, v, d, 0.99, 0.95), atol=1e-14)
    # written out: delta = (1.495, 1.495, 0.5)
    d0, d2 = 1 + 0.99 * 0.5 - 0.5, 0.5
    assert adv[2] == pytest.approx(d2)
    assert adv[1] == pytest.approx(d0 + 0.99 * 0.95 * d2)
    assert adv[0] == pytest.approx(d0 + 0.9405 * d0 + 0.9405 ** 2 * d2)
    assert np.allclose(ret, adv + 0.5)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=8), rng.normal(size=8)
    d = np.zeros(8, dtype=bool)
    d[3] = True
    adv, _ = compute_gae(r, v, d, np.zeros(8, dtype=bool), 0.9, 0.0, bootstrap_value=0.7)
    nxt = np.append(v[1:], 0.7)
    assert np.allclose(adv, r + 0.9 * nxt * (~d) - v, atol=1e-15)


def test_gae_monte_carlo_limit():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    adv, _ = compute_gae(r, np.zeros(4), np.zeros(4, bool), np.zeros(4, bool), 1.0, 1.0)
    assert np.array_equal(adv, [10.0, 9.0, 7.0, 4.0])


def test_gae_random_against_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 30))
        r, v = rng.normal(size=n), rng.normal(size=n)
        d = rng.random(n) < 0.2
        adv, _ = compute_gae(r, v, d, np.zeros(n, bool), 0.97, 0.9, bootstrap_value=0.3)
        assert np.allclose(adv, brute_gae(r, v, d, 0.97, 0.9, 0.3), atol=1e-12)


def test_gae_truncation_bootstraps():
    adv, _ = compute_gae([1.0, 1.0], [0.0, 0.0], [False, False], [True, False], 0.5, 1.0,
                         bootstrap_value=0.0, truncation_values=[4.0, 0.0])
    assert adv[0] == pytest.approx(1.0 + 0.5 * 4.0)


def test_gae_length_mismatch():
    with pytest.raises(DimensionError):
        compute_gae([1.0], [1.0, 2.0], [False], [False], 0.9, 0.9)


def _rollout(seed=0, interval=64):
    seq = make_task_sequence("cartpole", k=1, sigma=0.5, budget_N=1000, seed=1)
    net = init_network(MLPConfig((4, 16, 2), value_head=1), 2)
    runner = TaskRunner(seq[0], np.random.default_rng(seed))
    return net, collect_rollout(net, runner, interval, np.random.default_rng(seed + 1))


def test_rollout_deterministic_and_consistent():
    net, a = _rollout()
    _, b = _rollout()
    assert np.array_equal(a.observations, b.observations) and np.array_equal(a.actions, b.actions)
    logp = log_softmax(forward(net, a.observations).outputs)[np.arange(len(a)), a.actions]
    assert np.allclose(a.log_probs, logp, atol=1e-12)
    assert np.all(a.rewards == 1.0) and len(a) == 64


def _ppo_fd(net, obs, act, old, adv, ret, cfg):
    _, g, _ = ppo_loss(net, obs, act, old, adv, ret, cfg)

    def f(theta):
        probe = Network(net.config, theta)
        return ppo_loss(probe, obs, act, old, adv, ret, cfg)[0]
    return rel_err(g, central_diff(f, net.params))


def test_ppo_loss_gradient_finite_difference():
    rng = np.random.default_rng(4)
    net = init_network(MLPConfig((4, 8, 3), value_head=1, output_gain=1.0), 5)
    obs = rng.normal(size=(6, 4))
    act = rng.integers(3, size=6)
    old = log_softmax(forward(net, obs).outputs)[np.arange(6), act] + rng.normal(scale=0.3, size=6)
    cfg = PPOConfig(entropy_coef=0.01)
    assert _ppo_fd(net, obs, act, old, rng.normal(size=6), rng.normal(size=6), cfg) < 1e-5
    # single sample
    assert _ppo_fd(net, obs[:1], act[:1], old[:1], np.array([0.7]), np.array([1.0]), cfg) < 1e-5


def test_ppo_ratio_one_and_zero_surrogate():
    net, buf = _rollout()
    batch = prepare(buf, PPOConfig())
    loss, _, info = ppo_loss(net, batch.observations, batch.actions, batch.log_probs, batch.advantages,
                             batch.returns, PPOConfig(), value_coef=0.0)
    assert abs(info["policy_loss"]) < 1e-12 and info["clip_fraction"] == 0.0
    assert abs(info["approx_kl"]) < 1e-12


def test_zero_advantage_zero_policy_gradient():
    net, buf = _rollout()
    _, g, _ = ppo_loss(net, buf.observations, buf.actions, buf.log_probs, np.zeros(len(buf)),
                       np.zeros(len(buf)), PPOConfig(), value_coef=0.0)
    assert not g.any()


def test_normalize():
    a = normalize(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(a.mean()) < 1e-15 and a.std() == pytest.approx(1.0)
    assert np.array_equal(normalize(np.ones(3)), np.zeros(3))


def test_value_loss_gradient():
    rng = np.random.default_rng(1)
    vnet = init_network(MLPConfig((3, 5, 1), output_gain=1.0), 0)
    X, y = rng.normal(size=(4, 3)), rng.normal(size=4)
    _, g, _ = value_loss_and_grad(vnet, X, y, 0.5)
    f = lambda th: value_loss_and_grad(Network(vnet.config, th), X, y, 0.5)[0]
    assert rel_err(g, central_diff(f, vnet.params)) < 1e-5


def test_ppo_update_without_plugin_matches_manual_loop():
    net, buf = _rollout()
    cfg = PPOConfig(epochs=2)
    batch = prepare(buf, cfg)
    a, b = net.copy(), net.copy()
    opt_a, opt_b = Optimizer(net.config.n_params, "adam", cfg.lr), Optimizer(net.config.n_params, "adam", cfg.lr)
    stats = ppo_update(a, opt_a, batch, cfg, np.random.default_rng(9))
    rng = np.random.default_rng(9)
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(batch))
        for s in range(0, len(batch), cfg.minibatch):
            idx = np.sort(perm[s:s + cfg.minibatch])
            _, g, _ = ppo_loss(b, batch.observations[idx], batch.actions[idx], batch.log_probs[idx],
                               batch.advantages[idx], batch.returns[idx], cfg)
            b.set_params(opt_b.step(b.params, g))
    assert np.array_equal(a.params, b.params)
    assert all(np.isfinite(stats[k]) for k in ("L_main", "value_loss", "entropy"))


def test_ppo_epochs_zero_and_probe_non_interference():
    net, buf = _rollout()
    batch = prepare(buf, PPOConfig())
    frozen = net.copy()
    ppo_update(frozen, Optimizer(net.config.n_params), batch, PPOConfig(epochs=0), np.random.default_rng(0))
    assert np.array_equal(frozen.params, net.params)
    a, b = net.copy(), net.copy()
    ppo_update(a, Optimizer(net.config.n_params), batch, PPOConfig(), np.random.default_rng(1))
    st = ppo_update(b, Optimizer(net.config.n_params), batch, PPOConfig(), np.random.default_rng(1),
                    probe_rng=np.random.default_rng(2))
    assert np.array_equal(a.params, b.params) and st["measured_churn"] > 0


def test_ppo_update_with_chain_is_finite():
    net, buf = _rollout()
    batch = prepare(buf, PPOConfig())
    st = ppo_update(net, Optimizer(net.config.n_params), batch, PPOConfig(), np.random.default_rng(1),
                    churn=ChurnConfig(beta=1e-3), chain_state=ChainState())
    assert np.isfinite(st["lambda"]) and st["lambda"] > 0 and np.isfinite(st["L_churn"])


def _linear_q(W, b=None):
    """Q(s) = s @ W + b for one-hot states."""
    W = np.asarray(W, dtype=np.float64)
    cfg = MLPConfig(W.shape)
    return Network(cfg, np.concatenate([W.ravel(), np.zeros(W.shape[1]) if b is None else b]))


def test_double_dqn_target_two_state_mdp():
    online = _linear_q([[1.0, 3.0], [2.0, 0.0]])
    target = _linear_q([[5.0, 4.0], [7.0, 6.0]])
    s1, s0 = np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])
    # online argmax at s1 is action 0; target evaluates Q(s1, 0) = 7
    assert double_dqn_target(online, target, [1.0], s1, [0.0], 0.9)[0] == pytest.approx(1.0 + 0.9 * 7.0)
    # online argmax at s0 is action 1; target Q(s0, 1) = 4
    assert double_dqn_target(online, target, [0.5], s0, [0.0], 0.5)[0] == pytest.approx(0.5 + 0.5 * 4.0)
    assert double_dqn_target(online, target, [1.0], s1, [1.0], 0.9)[0] == 1.0
    assert double_dqn_target(online, target, [2.5], s1, [0.0], 0.0)[0] == 2.5


def test_td_loss_gradient():
    rng = np.random.default_rng(0)
    net = init_network(MLPConfig((3, 6, 2), output_gain=1.0), 1)
    X, a, y = rng.normal(size=(5, 3)), rng.integers(2, size=5), rng.normal(size=5)
    _, g = td_loss_and_grad(net, X, a, y)
    f = lambda th: td_loss_and_grad(Network(net.config, th), X, a, y)[0]
    assert rel_err(g, central_diff(f, net.params)) < 1e-5


def test_replay_ring_buffer():
    rb = ReplayBuffer(5, 2)
    for i in range(12):
        rb.add(np.full(2, i), i % 2, 1.0, np.full(2, i + 1), False)
    assert len(rb) == 5
    assert rb.insertions[:len(rb)].min() >= rb.total - rb.capacity
    idx = rb.sample_indices(np.random.default_rng(0), 3, exclude=[0, 1])
    assert not set(idx) & {0, 1}


def _learner(**kw):
    cfg = DQNConfig(warmup=10, batch=4, target_replace=5, buffer_capacity=100, **kw)
    net = init_network(MLPConfig((2, 8, 2), output_gain=1.0), 0)
    return DQNLearner(net, Optimizer(net.config.n_params, "adam", 1e-2), cfg, 2)


def test_dqn_warmup_and_target_sync():
    learner = _learner()
    rng = np.random.default_rng(0)
    for i in range(9):
        learner.replay.add(rng.normal(size=2), i % 2, 1.0, rng.normal(size=2), False)
    before = learner.q_net.params.copy()
    assert dqn_update(learner, rng) is None and np.array_equal(before, learner.q_net.params)
    learner.replay.add(rng.normal(size=2), 0, 1.0, rng.normal(size=2), False)
    for i in range(5):
        assert dqn_update(learner, rng) is not None
        if i < 4:
            assert not np.array_equal(learner.target_net.params, learner.q_net.params)
    assert np.array_equal(learner.target_net.params, learner.q_net.params)


def test_td_loss_decreases_on_bandit():
    learner = _learner()
    rng = np.random.default_rng(1)
    X = rng.normal(size=(16, 2))
    a = rng.integers(2, size=16)
    y = np.where(a == 0, 1.0, -1.0)
    losses = []
    for _ in range(50):
        loss, g = td_loss_and_grad(learner.q_net, X, a, y)
        learner.q_net.set_params(learner.optimizer.step(learner.q_net.params, g))
        losses.append(loss)
    assert losses[-1] < 0.2 * losses[0]
    assert np.mean(np.diff(losses) < 0) > 0.75


def test_dqn_with_chain():
    learner = _learner()
    learner.churn = ChurnConfig(beta=0.01, output_mode="q_values")
    learner.chain_state = ChainState()
    rng = np.random.default_rng(0)
    for i in range(30):
        learner.replay.add(rng.normal(size=2), i % 2, 1.0, rng.normal(size=2), i % 7 == 0)
    stats = [dqn_update(learner, rng, np.random.default_rng(i)) for i in range(5)]
    assert stats[-1]["lambda"] > 0 and np.isfinite(stats[-1]["measured_churn"])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PPOConfig(gamma=0.0)
    with pytest.raises(ConfigurationError):
        PPOConfig(clip_eps=0.0)
    with pytest.raises(ConfigurationError):
        DQNConfig(eps_start=0.1, eps_end=0.5)
