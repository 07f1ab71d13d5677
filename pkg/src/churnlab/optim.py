"""SGD and Adam as pure functions of ``(state, params, grad)``."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError

SWITCH_MODES = ("keep", "adam_rel", "full_reset")


def _check(params: np.ndarray, grad: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise DimensionError(f"params {params.shape} and grad {grad.shape} differ")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return params, grad


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params, grad = _check(params, grad)
    return params - lr * grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``."""
    params, grad = _check(params, grad)
    if state.m.shape != params.shape:
        raise DimensionError("optimizer state does not match parameter length")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def on_task_switch(state: AdamState, mode: str = "keep") -> AdamState:
    """``adam_rel`` restarts the bias-correction clock but keeps the moments."""
    if mode == "keep":
        return state
    if mode == "adam_rel":
        return replace(state, t=0)
    if mode == "full_reset":
        return replace(state, m=np.zeros_like(state.m), v=np.zeros_like(state.v), t=0)
    raise ConfigurationError(f"unknown task-switch mode {mode!r}")


class Optimizer:
    """Stateful wrapper that owns an ``AdamState`` (or nothing, for SGD)."""

    def __init__(self, n_params: int, kind: str = "adam", lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {kind!r}")
        if lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.kind = kind
        self.lr = lr
        self._hyper = (beta1, beta2, eps)
        self.state = AdamState.zeros(n_params, *self._hyper) if kind == "adam" else None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return sgd_step(params, grad, self.lr)
        new_params, self.state = adam_step(self.state, params, grad, self.lr)
        return new_params

    def on_task_switch(self, mode: str) -> None:
        if self.state is not None:
            self.state = on_task_switch(self.state, mode)

    def reset(self) -> None:
        if self.state is not None:
            self.state = AdamState.zeros(self.state.m.shape[0], *self._hyper)

    def zero_moments(self, mask: np.ndarray) -> None:
        """Clear moment estimates for the masked parameter entries."""
        if self.state is not None:
            keep = ~np.asarray(mask, dtype=bool)
            self.state = replace(self.state, m=self.state.m * keep, v=self.state.v * keep)
