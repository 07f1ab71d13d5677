"""Churn measurement and the C-CHAIN churn-reduction regularizer.

Churn is the change of a network's outputs on reference data that was not in
the training batch of an update. The regularizer penalizes the squared
output change on a reference batch, weighted by an automatically tuned
coefficient that holds the churn term at a fixed scale relative to the main
loss.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn import Network, backward, forward, log_softmax, log_softmax_vjp

log = logging.getLogger(__name__)

OUTPUT_MODES = ("policy_logprobs", "q_values", "raw")
ABLATION_MODES = ("full", "proj_only", "orth_only", "off")
REFERENCES = ("previous_step", "iteration_start")
LAMBDA_FLOOR = 1e-12


@dataclass
class ChurnConfig:
    beta: float = 1e4
    ref_batch_size: Optional[int] = None  # None: same as the training minibatch
    ema_decay: float = 0.99
    output_mode: str = "policy_logprobs"
    ablation_mode: str = "full"
    two_phase: bool = False
    # where fused-mode reference targets come from: the parameters before the
    # previous minibatch step, or the parameters at the start of the iteration
    reference: str = "previous_step"

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.ref_batch_size is not None and self.ref_batch_size < 1:
            raise ConfigurationError("ref_batch_size must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in (0, 1)")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigurationError(f"unknown output_mode {self.output_mode!r}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation_mode {self.ablation_mode!r}")
        if self.reference not in REFERENCES:
            raise ConfigurationError(f"unknown reference {self.reference!r}")


@dataclass
class RunningMeans:
    mean_abs_main_loss: float = 0.0
    mean_abs_churn_loss: float = 0.0
    initialized: bool = False

    def update(self, main_loss: float, churn_loss: float, decay: float) -> None:
        a, c = abs(float(main_loss)), abs(float(churn_loss))
        if not self.initialized:
            self.mean_abs_main_loss, self.mean_abs_churn_loss = a, c
            self.initialized = True
        else:
            self.mean_abs_main_loss = decay * self.mean_abs_main_loss + (1 - decay) * a
            self.mean_abs_churn_loss = decay * self.mean_abs_churn_loss + (1 - decay) * c


def transform_outputs(outputs: np.ndarray, mode: str) -> np.ndarray:
    if mode == "policy_logprobs":
        return log_softmax(outputs)
    return outputs


def _output_vjp(transformed: np.ndarray, upstream: np.ndarray, mode: str) -> np.ndarray:
    if mode == "policy_logprobs":
        return log_softmax_vjp(transformed, upstream)
    return upstream


def _same_arch(a: Network, b: Network):
    if a.config.layer_sizes != b.config.layer_sizes or a.config.n_params != b.config.n_params:
        raise ConfigurationError("churn is only defined between networks of the same architecture")


def measure_churn(net_before: Network, net_after: Network, X_ref, output_mode: str = "raw") -> float:
    """Mean over ``X_ref`` of the squared output distance between two networks (exact)."""
    _same_arch(net_before, net_after)
    before = transform_outputs(forward(net_before, X_ref).outputs, output_mode)
    after = transform_outputs(forward(net_after, X_ref).outputs, output_mode)
    return float(np.mean(np.sum((after - before) ** 2, axis=1)))


def measure_churn_params(net: Network, params_before, params_after, X_ref, output_mode: str = "raw") -> float:
    """``measure_churn`` for two parameter vectors of ``net``'s architecture."""
    before = transform_outputs(forward(net, X_ref, params=params_before).outputs, output_mode)
    after = transform_outputs(forward(net, X_ref, params=params_after).outputs, output_mode)
    return float(np.mean(np.sum((after - before) ** 2, axis=1)))


def measure_churn_signed(net_before: Network, net_after: Network, X_ref) -> np.ndarray:
    """Per-point output change ``f_after(x) - f_before(x)`` of scalar-output networks."""
    _same_arch(net_before, net_after)
    if net_before.config.output_dim != 1:
        raise DimensionError("signed churn needs a scalar-output network")
    return forward(net_after, X_ref).outputs[:, 0] - forward(net_before, X_ref).outputs[:, 0]


def predict_churn_ntk(G_all: np.ndarray, S, G_L, lr: float) -> np.ndarray:
    """First-order output change of every datapoint: ``-lr * N @ diag(S) @ G_L``.

    ``G_all`` is ``(d, n)`` with column i the parameter gradient at point i, so
    ``N = G_all.T @ G_all``. Rows where ``S`` is 0 predict churn on reference
    points; rows where it is 1 predict the change on trained points.
    """
    G_all = np.asarray(G_all, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    G_L = np.asarray(G_L, dtype=np.float64)
    if G_all.ndim != 2:
        raise DimensionError("G_all must be a (d, n) matrix")
    n = G_all.shape[1]
    if S.ndim == 2:
        S = np.diag(S)
    if S.shape != (n,) or G_L.shape != (n,):
        raise DimensionError(f"mask {S.shape} and loss gradients {G_L.shape} must have length {n}")
    if not np.all((S == 0) | (S == 1)):
        raise DimensionError("sampling mask must be 0/1")
    N = G_all.T @ G_all
    return -lr * (N @ (S * G_L))


def churn_loss_and_grad(net: Network, snapshot: np.ndarray, X_ref, output_mode: str = "raw",
                        cache=None):
    """Half the mean squared distance between current outputs on ``X_ref`` and ``snapshot``."""
    out = cache if cache is not None else forward(net, X_ref)
    y = transform_outputs(out.outputs, output_mode)
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.shape != y.shape:
        raise DimensionError(f"snapshot shape {snapshot.shape} does not match outputs {y.shape}")
    diff = y - snapshot
    loss = 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))
    grad = backward(net, out, _output_vjp(y, diff, output_mode))
    return loss, grad


def auto_lambda(rm: RunningMeans, beta: float, floor: float = LAMBDA_FLOOR) -> float:
    if not rm.initialized:
        return 0.0
    return beta * rm.mean_abs_main_loss / max(rm.mean_abs_churn_loss, floor)


def decompose_gradient(g_cr: np.ndarray, g_main: np.ndarray):
    """Split ``g_cr`` into its projection on ``g_main`` and the orthogonal rest."""
    g_cr = np.asarray(g_cr, dtype=np.float64)
    g_main = np.asarray(g_main, dtype=np.float64)
    if g_cr.shape != g_main.shape:
        raise DimensionError("gradients must have equal length")
    norm2 = float(g_main @ g_main)
    if norm2 == 0.0:
        return np.zeros_like(g_cr), g_cr.copy()
    proj = (float(g_cr @ g_main) / norm2) * g_main
    return proj, g_cr - proj


def ablate(g_cr: np.ndarray, g_main: np.ndarray, mode: str) -> np.ndarray:
    if mode == "full":
        return g_cr
    proj, orth = decompose_gradient(g_cr, g_main)
    if mode == "proj_only":
        return proj
    if mode == "orth_only":
        return orth
    return np.zeros_like(g_cr)


@dataclass
class ChainState:
    """Per-run regularizer state: loss running means and the previous parameters."""

    running: RunningMeans = field(default_factory=RunningMeans)
    prev_params: Optional[np.ndarray] = None

    def reset(self):
        self.running = RunningMeans()
        self.prev_params = None


MainLossFn = Callable[[Network], tuple]


def chain_step(net: Network, optimizer, train_idx, ref_idx, ref_inputs, main_loss_fn: MainLossFn,
               config: ChurnConfig, state: ChainState, measure: bool = False) -> dict:
    """One minibatch update with churn reduction on a disjoint reference batch.

    ``main_loss_fn(net)`` returns ``(loss_for_scale, grad)`` for the training
    batch. In the default fused mode the reference targets are the outputs at
    the parameters preceding the last update, and one optimizer step is taken
    on ``g_main + lambda * g_churn``. With ``two_phase`` the regular step is
    taken first and a second step then pulls the reference outputs back to
    their pre-update values.
    """
    train_idx = np.asarray(train_idx)
    ref_idx = np.asarray(ref_idx)
    if np.intersect1d(train_idx, ref_idx).size:
        raise ConfigurationError("reference and training batches overlap")
    mode = config.output_mode
    stats = {"lambda": 0.0, "L_main": 0.0, "L_churn": 0.0, "measured_churn": float("nan")}

    if config.ablation_mode == "off":
        main_loss, g_main = main_loss_fn(net)
        before = net.params.copy() if measure else None
        net.set_params(optimizer.step(net.params, g_main))
        stats["L_main"] = float(main_loss)
        if measure:
            stats["measured_churn"] = measure_churn_params(net, before, net.params, ref_inputs, mode)
        return stats

    if config.two_phase:
        return _chain_step_two_phase(net, optimizer, ref_inputs, main_loss_fn, config, state, measure, stats)

    out_ref = forward(net, ref_inputs)
    if state.prev_params is None:
        churn_loss, g_churn = None, None
    else:
        snapshot = transform_outputs(forward(net, ref_inputs, params=state.prev_params).outputs, mode)
        churn_loss, g_churn = churn_loss_and_grad(net, snapshot, ref_inputs, mode, cache=out_ref)
    main_loss, g_main = main_loss_fn(net)
    lam = auto_lambda(state.running, config.beta)
    before = net.params.copy()
    grad = g_main
    if g_churn is not None and lam > 0.0:
        grad = g_main + lam * ablate(g_churn, g_main, config.ablation_mode)
    net.set_params(optimizer.step(net.params, grad))
    if config.reference == "previous_step":
        state.prev_params = before
    if churn_loss is not None:
        state.running.update(main_loss, churn_loss, config.ema_decay)
    stats.update({"lambda": lam, "L_main": float(main_loss), "L_churn": float(churn_loss or 0.0)})
    if measure:
        after = transform_outputs(forward(net, ref_inputs).outputs, mode)
        stats["measured_churn"] = float(np.mean(np.sum(
            (after - transform_outputs(out_ref.outputs, mode)) ** 2, axis=1)))
    return stats


def _chain_step_two_phase(net, optimizer, ref_inputs, main_loss_fn, config, state, measure, stats):
    mode = config.output_mode
    snapshot = transform_outputs(forward(net, ref_inputs).outputs, mode)
    main_loss, g_main = main_loss_fn(net)
    net.set_params(optimizer.step(net.params, g_main))
    churn_loss, g_churn = churn_loss_and_grad(net, snapshot, ref_inputs, mode)
    lam = auto_lambda(state.running, config.beta)
    if lam > 0.0:
        net.set_params(optimizer.step(net.params, lam * ablate(g_churn, g_main, config.ablation_mode)))
    state.running.update(main_loss, churn_loss, config.ema_decay)
    stats.update({"lambda": lam, "L_main": float(main_loss), "L_churn": float(churn_loss)})
    if measure:
        after = transform_outputs(forward(net, ref_inputs).outputs, mode)
        stats["measured_churn"] = float(np.mean(np.sum((after - snapshot) ** 2, axis=1)))
    return stats
