"""Competing plasticity mechanisms: L2 Init, weight clipping, ReDo and oracle resets."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .nn import Network, forward, init_network, unflatten

log = logging.getLogger(__name__)

MECHANISMS = ("none", "l2_init", "weight_clip", "redo", "oracle_reset", "layer_norm")


@dataclass
class BaselineConfig:
    mechanism: str = "none"
    l2_coeff: float = 0.1
    clip_kappa: float = 1.0
    redo_tau: float = 0.1
    redo_interval: int = 1000  # training iterations

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.l2_coeff < 0:
            raise ConfigurationError("l2_coeff must be >= 0")
        if self.clip_kappa <= 0:
            raise ConfigurationError("clip_kappa must be > 0")
        if not 0.0 <= self.redo_tau < 1.0:
            raise ConfigurationError("redo_tau must lie in [0, 1)")
        if self.redo_interval < 1:
            raise ConfigurationError("redo_interval must be >= 1")


def l2_init_penalty(params, init_params, coeff: float):
    """``coeff * ||params - init||^2`` and its gradient."""
    params = np.asarray(params, dtype=np.float64)
    init_params = np.asarray(init_params, dtype=np.float64)
    if params.shape != init_params.shape:
        raise DimensionError("params and init_params differ in length")
    diff = params - init_params
    return coeff * float(diff @ diff), 2.0 * coeff * diff


def weight_clip(params, kappa: float) -> np.ndarray:
    if kappa <= 0:
        raise ConfigurationError("clip range must be positive")
    return np.clip(params, -kappa, kappa)


def clip_saturation(params, kappa: float) -> float:
    """Fraction of entries sitting on the clip boundary."""
    return float(np.mean(np.abs(params) >= kappa))


def dormant_scores(net: Network, X) -> list:
    """Per hidden layer, each unit's mean |activation| over the mean of its layer."""
    scores = []
    for a in forward(net, X).hidden:
        mean_abs = np.abs(a).mean(axis=0)
        layer_mean = mean_abs.mean()
        scores.append(mean_abs / layer_mean if layer_mean > 0 else np.zeros_like(mean_abs))
    return scores


def redo_recycle(net: Network, X, tau: float, seed):
    """Recycle dormant units: fresh incoming weights, zeroed outgoing weights.

    Returns ``(new_net, n_recycled, touched)`` where ``touched`` is a boolean
    mask of the parameter entries that were rewritten (for resetting
    optimizer moments).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError("activation batch must be a non-empty matrix")
    config = net.config
    scores = dormant_scores(net, X)
    fresh = unflatten(config, init_network(config, seed).params.copy())
    new_params = net.params.copy()
    p = unflatten(config, new_params)
    touched = np.zeros(config.n_params, dtype=bool)
    t = unflatten(config, touched)
    count = 0
    dormant_by_layer = [np.flatnonzero(s <= tau) for s in scores]
    for l, units in enumerate(dormant_by_layer):
        if units.size == 0:
            continue
        count += units.size
        p[("W", l)][:, units] = fresh[("W", l)][:, units]
        p[("b", l)][units] = fresh[("b", l)][units]
        t[("W", l)][:, units] = True
        t[("b", l)][units] = True
        if config.use_layer_norm:
            for name in ("gain", "shift"):
                p[(name, l)][units] = fresh[(name, l)][units]
                t[(name, l)][units] = True
    # outgoing weights last so a re-drawn incoming row of a dormant unit is zeroed again
    for l, units in enumerate(dormant_by_layer):
        if units.size == 0:
            continue
        p[("W", l + 1)][units, :] = 0.0
        t[("W", l + 1)][units, :] = True
        if l == config.n_hidden - 1 and config.value_head is not None:
            p[("Wv", -1)][units, :] = 0.0
            t[("Wv", -1)][units, :] = True
    new_net = Network(config, new_params, net.init_params)
    return new_net, count, touched


def oracle_reset(net: Network, optimizer, seed, is_switch_step: bool) -> Network:
    """Fresh initialization and zeroed optimizer state at a task switch."""
    if not is_switch_step:
        raise UsageError("oracle reset is only allowed at task-switch steps")
    if optimizer is not None:
        optimizer.reset()
    return init_network(net.config, seed)
