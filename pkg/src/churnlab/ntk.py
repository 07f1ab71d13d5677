"""Empirical NTK collection and the statistics tracked during training."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn import Network, backward, forward, per_sample_grads

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.01


@dataclass
class NTKReport:
    matrix: np.ndarray
    srank: int
    offdiag_abs_sum: float
    diag_abs_sum: float
    iteration: int = 0
    task_index: int = 0


def collect_minibatch_grads(net: Network, n_data: int, m: int,
                            loss_grad_fn: Callable[[Network, np.ndarray], np.ndarray], rng) -> list:
    """Split ``range(n_data)`` into ``m`` random disjoint minibatches and take a gradient on each.

    ``loss_grad_fn(net, idx)`` returns the parameter gradient of the objective
    restricted to the rows ``idx``. Gradients are read-only probes: ``net`` is
    not modified.
    """
    if m < 1 or n_data < m:
        raise ConfigurationError(f"cannot split {n_data} samples into {m} minibatches")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    parts = np.array_split(rng.permutation(n_data), m)
    return [np.asarray(loss_grad_fn(net, np.sort(idx)), dtype=np.float64) for idx in parts]


def empirical_ntk(grads: Sequence[np.ndarray]) -> np.ndarray:
    if len({np.shape(g) for g in grads}) > 1:
        raise DimensionError("gradients must all have the same length")
    G = np.asarray(grads, dtype=np.float64)
    if G.ndim != 2:
        raise DimensionError("gradients must all have the same length")
    N = G @ G.T
    return 0.5 * (N + N.T)


def singular_values(matrix: np.ndarray) -> np.ndarray:
    """Singular values in decreasing order; symmetric input goes through ``eigvalsh``."""
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim == 2 and A.shape[0] == A.shape[1] and np.array_equal(A, A.T):
        s = np.abs(np.linalg.eigvalsh(A))
    else:
        s = np.linalg.svd(A, compute_uv=False)
    return np.sort(s)[::-1]


def srank(matrix: np.ndarray, delta: float = DEFAULT_DELTA) -> int:
    """Smallest k whose top-k singular values carry a ``1 - delta`` share of the total."""
    if not 0.0 <= delta < 1.0:
        raise ConfigurationError("delta must lie in [0, 1)")
    s = singular_values(matrix)
    total = s.sum()
    if total == 0.0:
        log.warning("srank of an all-zero matrix is defined as 0")
        return 0
    cumulative = np.cumsum(s)
    # the small slack absorbs rounding in exactly-uniform spectra
    hit = cumulative >= (1.0 - delta) * total - 1e-12 * total
    return int(np.argmax(hit)) + 1


def offdiag_stats(matrix: np.ndarray):
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError("matrix must be square")
    absA = np.abs(A)
    diag = float(np.trace(absA))
    return float(absA.sum() - diag), diag


def masked_ntk(N: np.ndarray, train_indices) -> np.ndarray:
    """``N @ S`` with ``S`` the 0/1 diagonal selecting the training columns."""
    N = np.asarray(N, dtype=np.float64)
    idx = np.asarray(train_indices, dtype=int).ravel()
    n = N.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"training index out of range for a {n}-column matrix")
    mask = np.zeros(n)
    mask[idx] = 1.0
    return N * mask[None, :]


def make_report(grads, iteration: int = 0, task_index: int = 0, delta: float = DEFAULT_DELTA) -> NTKReport:
    N = empirical_ntk(grads)
    off, diag = offdiag_stats(N)
    return NTKReport(N, srank(N, delta), off, diag, iteration, task_index)


@dataclass
class SandboxTrace:
    errors: np.ndarray      # (steps + 1, n): error vector before each step and after the last
    predicted: np.ndarray   # (steps, n): first-order prediction of the next error
    residual: np.ndarray    # (steps,): ||actual - predicted||
    tasks: np.ndarray       # (steps,)
    net: Network

    @property
    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=1)


def error_dynamics_sandbox(net: Network, X, fixed_targets, schedule, lr: float,
                           steps: int | None = None) -> SandboxTrace:
    """Gradient descent on squared regression error with task switches.

    ``fixed_targets`` is ``(k, n)``: task i's target value at each of the n
    inputs. ``schedule`` is a list of ``(task_index, train_indices, n_steps)``
    segments. The loss is ``0.5 * sum_{i in S} (target_i - f(x_i))^2`` (a sum,
    so one SGD step changes the error by ``-lr * N S E`` to first order).
    ``net`` is left untouched; the trained copy is returned on the trace.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(fixed_targets, dtype=np.float64))
    if net.config.output_dim != 1:
        raise DimensionError("the sandbox needs a scalar-output network")
    if targets.shape[1] != X.shape[0]:
        raise DimensionError("targets must have one value per input row")
    plan = []
    for task, idx, count in schedule:
        plan.extend([(int(task), np.asarray(idx, dtype=int))] * int(count))
    if steps is not None:
        plan = plan[:steps]
    work = net.copy()
    n = X.shape[0]
    errors, predicted, residual, tasks = [], [], [], []
    for task, idx in plan:
        f = forward(work, X).outputs[:, 0]
        E = targets[task] - f
        S = np.zeros(n)
        S[idx] = 1.0
        G = per_sample_grads(work, X)
        N = G @ G.T
        pred = E - lr * (N @ (S * E))
        out = forward(work, X[idx])
        grad = len(idx) * backward(work, out, -E[idx][:, None])
        work.set_params(work.params - lr * grad)
        E_next = targets[task] - forward(work, X).outputs[:, 0]
        errors.append(E)
        predicted.append(pred)
        residual.append(float(np.linalg.norm(E_next - pred)))
        tasks.append(task)
        last_error = E_next
    if plan:
        errors.append(last_error)
    else:
        errors.append(targets[0] - forward(work, X).outputs[:, 0])
    return SandboxTrace(
        errors=np.array(errors),
        predicted=np.array(predicted).reshape(len(plan), n),
        residual=np.array(residual),
        tasks=np.array(tasks, dtype=int),
        net=work,
    )
