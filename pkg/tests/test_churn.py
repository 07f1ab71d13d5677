import numpy as np
import pytest

from churnlab.churn import (ChainState, ChurnConfig, RunningMeans, ablate, auto_lambda, chain_step,
                            churn_loss_and_grad, decompose_gradient, measure_churn, measure_churn_signed,
                            predict_churn_ntk, transform_outputs)
from churnlab.errors import ConfigurationError, DimensionError
from churnlab.nn import MLPConfig, Network, backward, forward, init_network, per_sample_grads
from churnlab.optim import Optimizer

from conftest import central_diff, linear_net, rel_err


def test_identical_networks_zero_churn(small_net):
    X = np.random.default_rng(0).normal(size=(7, 3))
    assert measure_churn(small_net, small_net.copy(), X) == 0.0
    assert measure_churn(small_net, small_net.copy(), X, "policy_logprobs") == 0.0


def test_linear_churn_exact():
    rng = np.random.default_rng(1)
    w, dw = rng.normal(size=4), rng.normal(size=4)
    X = rng.normal(size=(6, 4))
    a, b = linear_net(w), linear_net(w + dw)
    assert np.allclose(measure_churn_signed(a, b, X), X @ dw, atol=1e-12)
    assert measure_churn(a, b, X) == pytest.approx(np.mean((X @ dw) ** 2), rel=1e-12)


def test_churn_matches_double_forward(small_net):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(9, 3))
    out = forward(small_net, X[:4])
    g = backward(small_net, out, rng.normal(size=(4, 2)))
    after = Network(small_net.config, small_net.params - 0.1 * g)
    fa, fb = forward(after, X).outputs, forward(small_net, X).outputs
    brute = sum(((fa[i] - fb[i]) ** 2).sum() for i in range(9)) / 9
    assert measure_churn(small_net, after, X) == pytest.approx(brute, rel=1e-12)


def test_predict_churn_zero_lr_and_orthogonal():
    G = np.random.default_rng(0).normal(size=(5, 3))
    assert not predict_churn_ntk(G, [1, 0, 0], [1.0, 2.0, 3.0], 0.0).any()
    G = np.array([[1.0, 0.0], [0.0, 1.0]])  # columns: train point, reference point
    pred = predict_churn_ntk(G, [1, 0], [1.0, 1.0], 0.1)
    assert pred[1] == 0.0 and pred[0] == pytest.approx(-0.1)
    with pytest.raises(DimensionError):
        predict_churn_ntk(G, [1, 0, 1], [1.0, 1.0], 0.1)


def _sgd_on_points(net, X, S, G_L, lr):
    """theta' = theta - lr * sum_i S_i G_L_i grad f(x_i)."""
    idx = np.flatnonzero(S)
    out = forward(net, X[idx])
    g = len(idx) * backward(net, out, G_L[idx][:, None])
    return Network(net.config, net.params - lr * g)


def test_predict_churn_linear_exact():
    rng = np.random.default_rng(3)
    net = linear_net(rng.normal(size=3), 0.4)
    X = rng.normal(size=(6, 3))
    S = np.array([1, 1, 0, 0, 1, 0])
    G_L = rng.normal(size=6)
    pred = predict_churn_ntk(per_sample_grads(net, X).T, S, G_L, 0.05)
    moved = measure_churn_signed(net, _sgd_on_points(net, X, S, G_L, 0.05), X)
    assert np.allclose(moved, pred, atol=1e-12)


def first_order_slope(seed=0):
    """Slope of log|measured - predicted| against log lr on a 2-layer tanh net."""
    rng = np.random.default_rng(seed)
    net = init_network(MLPConfig((3, 16, 1), activation="tanh", output_gain=1.0), seed)
    X = rng.normal(size=(8, 3))
    S = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    G_L = rng.normal(size=8)
    Gt = per_sample_grads(net, X).T
    lrs = np.array([1e-2, 3e-3, 1e-3, 3e-4, 1e-4])
    res = []
    for lr in lrs:
        moved = measure_churn_signed(net, _sgd_on_points(net, X, S, G_L, lr), X)
        res.append(np.linalg.norm(moved - predict_churn_ntk(Gt, S, G_L, lr)))
    return np.polyfit(np.log(lrs), np.log(res), 1)[0]


def test_first_order_residual_is_second_order():
    for seed in range(3):
        assert 1.8 <= first_order_slope(seed) <= 2.2


def test_churn_loss_basics(small_net):
    X = np.random.default_rng(0).normal(size=(4, 3))
    snap = forward(small_net, X).outputs
    loss, g = churn_loss_and_grad(small_net, snap, X)
    assert loss == 0.0 and not g.any()
    net = linear_net([0.0])
    loss, _ = churn_loss_and_grad(net, np.array([[2.0]]), np.array([[1.0]]))
    assert loss == 2.0
    with pytest.raises(DimensionError):
        churn_loss_and_grad(net, np.zeros((2, 1)), np.ones((1, 1)))


@pytest.mark.parametrize("mode", ["raw", "policy_logprobs"])
def test_churn_loss_finite_difference(small_net, mode):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(5, 3))
    snap = transform_outputs(rng.normal(size=(5, 2)), mode)
    _, g = churn_loss_and_grad(small_net, snap, X, mode)
    f = lambda th: churn_loss_and_grad(Network(small_net.config, th), snap, X, mode)[0]
    assert rel_err(g, central_diff(f, small_net.params)) < 1e-5


def test_auto_lambda():
    rm = RunningMeans(0.02, 4.0, True)
    assert auto_lambda(rm, 1000.0) == pytest.approx(5.0)
    tiny = RunningMeans(1.0, 0.0, True)
    assert auto_lambda(tiny, 1.0) == 1e12 and np.isfinite(auto_lambda(tiny, 1.0))
    assert auto_lambda(RunningMeans(), 1.0) == 0.0
    rm = RunningMeans(0.3, 0.7, True)
    assert auto_lambda(rm, 0.5) * rm.mean_abs_churn_loss == pytest.approx(0.5 * rm.mean_abs_main_loss)


def test_running_means_ema():
    rm = RunningMeans()
    rm.update(-2.0, 1.0, 0.9)
    rm.update(4.0, 3.0, 0.9)
    assert rm.mean_abs_main_loss == pytest.approx(0.9 * 2 + 0.1 * 4)
    assert rm.mean_abs_churn_loss == pytest.approx(0.9 * 1 + 0.1 * 3)


def test_decompose_gradient():
    rng = np.random.default_rng(0)
    g = rng.normal(size=7)
    proj, orth = decompose_gradient(3.0 * g, g)
    assert np.allclose(orth, 0.0, atol=1e-12)
    proj, orth = decompose_gradient(np.array([0.0, 2.0]), np.array([1.0, 0.0]))
    assert not proj.any()
    for _ in range(100):
        a, b = rng.normal(size=11), rng.normal(size=11)
        p, o = decompose_gradient(a, b)
        assert np.allclose(p + o, a, atol=1e-12) and abs(o @ b) < 1e-12 * np.linalg.norm(a) * np.linalg.norm(b)
        assert np.allclose(ablate(a, b, "proj_only") + ablate(a, b, "orth_only"), ablate(a, b, "full"),
                           atol=1e-12)
    assert not ablate(a, b, "off").any()
    p, o = decompose_gradient(a, np.zeros(11))
    assert not p.any() and np.array_equal(o, a)


def test_config_validation():
    for bad in ({"beta": 0.0}, {"output_mode": "x"}, {"ablation_mode": "y"}, {"ema_decay": 1.0},
                {"reference": "z"}):
        with pytest.raises(ConfigurationError):
            ChurnConfig(**bad)


class Regression:
    def __init__(self, seed, n=64, n_ref=32):
        rng = np.random.default_rng(seed)
        self.X = rng.normal(size=(n + n_ref, 2))
        self.y = np.sin(2 * self.X[:, 0]) + 0.5 * self.X[:, 1]
        self.n = n
        self.held = rng.normal(size=(32, 2))

    def loss_fn(self, idx):
        X, y = self.X[idx], self.y[idx]

        def fn(net):
            out = forward(net, X)
            err = out.outputs[:, 0] - y
            return float(np.mean(err ** 2)), backward(net, out, 2 * err[:, None])
        return fn


def _regression_run(seed, config, iters=200, batch=8, kind="sgd", lr=0.05):
    task = Regression(seed)
    net = init_network(MLPConfig((2, 32, 1), activation="tanh", output_gain=1.0), seed)
    opt = Optimizer(net.config.n_params, kind, lr)
    state = ChainState()
    rng = np.random.default_rng(seed + 100)
    churns, params = [], []
    for _ in range(iters):
        idx = rng.choice(task.n, batch, replace=False)
        ref = task.n + rng.choice(task.X.shape[0] - task.n, batch, replace=False)
        before = net.copy()
        chain_step(net, opt, idx, ref, task.X[ref], task.loss_fn(idx), config, state)
        churns.append(measure_churn(before, net, task.held))
        params.append(net.params.copy())
    return np.array(churns), params


def test_off_mode_is_vanilla():
    cfg = ChurnConfig(output_mode="raw", ablation_mode="off")
    _, a = _regression_run(0, cfg, iters=20)
    task = Regression(0)
    net = init_network(MLPConfig((2, 32, 1), activation="tanh", output_gain=1.0), 0)
    opt = Optimizer(net.config.n_params, "sgd", 0.05)
    rng = np.random.default_rng(100)
    for it in range(20):
        idx = rng.choice(task.n, 8, replace=False)
        rng.choice(task.X.shape[0] - task.n, 8, replace=False)
        _, g = task.loss_fn(idx)(net)
        net.set_params(opt.step(net.params, g))
        assert np.array_equal(net.params, a[it])


def test_small_beta_approaches_vanilla():
    off, _ = _regression_run(0, ChurnConfig(output_mode="raw", ablation_mode="off"), iters=30)
    _, p_off = _regression_run(0, ChurnConfig(output_mode="raw", ablation_mode="off"), iters=30)
    dists = []
    for beta in (1e-2, 1e-4, 1e-6):
        _, p = _regression_run(0, ChurnConfig(beta=beta, output_mode="raw"), iters=30)
        dists.append(np.linalg.norm(p[-1] - p_off[-1]))
    assert dists[0] > dists[1] > dists[2] and dists[2] < 1e-6


def test_chain_reduces_churn_on_regression():
    diffs = []
    for seed in range(5):
        vanilla, _ = _regression_run(seed, ChurnConfig(output_mode="raw", ablation_mode="off"), kind="adam", lr=1e-2)
        chain, _ = _regression_run(seed, ChurnConfig(beta=0.1, output_mode="raw"), kind="adam", lr=1e-2)
        diffs.append(chain.mean() - vanilla.mean())
    assert np.mean(diffs) < 0 and all(d < 0 for d in diffs)


def test_overlapping_batches_rejected(small_net):
    with pytest.raises(ConfigurationError):
        chain_step(small_net, Optimizer(small_net.config.n_params), [0, 1], [1, 2], np.zeros((2, 3)),
                   None, ChurnConfig(), ChainState())


def test_two_phase_pulls_back():
    task = Regression(1)
    net = init_network(MLPConfig((2, 16, 1), activation="tanh", output_gain=1.0), 1)
    cfg = ChurnConfig(beta=1.0, output_mode="raw", two_phase=True)
    state = ChainState()
    opt = Optimizer(net.config.n_params, "sgd", 0.05)
    idx, ref = np.arange(8), task.n + np.arange(8)
    stats = [chain_step(net, opt, idx, ref, task.X[ref], task.loss_fn(idx), cfg, state, measure=True)
             for _ in range(3)]
    assert stats[0]["lambda"] == 0.0 and stats[-1]["lambda"] > 0
    assert all(np.isfinite(s["measured_churn"]) for s in stats)
