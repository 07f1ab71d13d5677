"""Dense MLPs over a flat float64 parameter vector, with hand-written backprop.

Weights are stored as ``(fan_in, fan_out)`` so a layer computes ``X @ W + b``.
The flat layout is, per layer: ``W, b`` then (hidden layers only, when layer
norm is on) ``gain, shift``; an optional value head ``Wv, bv`` comes last.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError, StateError

LN_VAR_FLOOR = 1e-8
ACTIVATIONS = ("tanh", "relu")
INIT_SCHEMES = ("orthogonal_scaled", "uniform_fanin")


@dataclass(frozen=True)
class MLPConfig:
    layer_sizes: tuple
    activation: str = "tanh"
    use_layer_norm: bool = False
    init_scheme: str = "orthogonal_scaled"
    value_head: Optional[int] = None
    # orthogonal gain of the main output layer; 0.01 for policy logits
    output_gain: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ConfigurationError("need at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init scheme {self.init_scheme!r}")
        if self.value_head is not None and self.value_head < 1:
            raise ConfigurationError("value_head size must be >= 1")
        if self.value_head is not None and len(self.layer_sizes) < 3:
            raise ConfigurationError("a value head needs at least one hidden layer")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @cached_property
    def layout(self) -> list:
        """List of ``(name, layer, shape, offset)`` entries of the flat vector."""
        entries = []
        offset = 0

        def add(name, layer, shape):
            nonlocal offset
            entries.append((name, layer, shape, offset))
            offset += int(np.prod(shape))

        sizes = self.layer_sizes
        for l in range(len(sizes) - 1):
            add("W", l, (sizes[l], sizes[l + 1]))
            add("b", l, (sizes[l + 1],))
            if self.use_layer_norm and l < self.n_hidden:
                add("gain", l, (sizes[l + 1],))
                add("shift", l, (sizes[l + 1],))
        if self.value_head is not None:
            add("Wv", -1, (sizes[-2], self.value_head))
            add("bv", -1, (self.value_head,))
        return entries

    @property
    def n_params(self) -> int:
        name, layer, shape, offset = self.layout[-1]
        return offset + int(np.prod(shape))


def unflatten(config: MLPConfig, flat: np.ndarray) -> dict:
    """Views into ``flat`` keyed by ``(name, layer)``; writes go through."""
    if flat.shape != (config.n_params,):
        raise DimensionError(f"expected {config.n_params} parameters, got {flat.shape}")
    return {
        (name, layer): flat[offset:offset + int(np.prod(shape))].reshape(shape)
        for name, layer, shape, offset in config.layout
    }


def flatten(config: MLPConfig, parts: dict) -> np.ndarray:
    flat = np.empty(config.n_params)
    for name, layer, shape, offset in config.layout:
        flat[offset:offset + int(np.prod(shape))] = np.asarray(parts[(name, layer)]).ravel()
    return flat


class Network:
    """An MLP and its parameters.

    ``init_params`` is a read-only copy of the parameters at construction.
    ``version`` increments on every parameter write so stale forward caches
    can be detected.
    """

    def __init__(self, config: MLPConfig, params: np.ndarray, init_params: Optional[np.ndarray] = None):
        params = np.array(params, dtype=np.float64)
        if params.shape != (config.n_params,):
            raise DimensionError(f"expected {config.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise InputError("parameters must be finite")
        self.config = config
        self._params = params
        init = params.copy() if init_params is None else np.array(init_params, dtype=np.float64)
        init.flags.writeable = False
        self.init_params = init
        self.version = 0

    @property
    def params(self) -> np.ndarray:
        view = self._params.view()
        view.flags.writeable = False
        return view

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._params.shape:
            raise DimensionError(f"expected {self._params.shape}, got {values.shape}")
        self._params[:] = values
        self.version += 1

    def parts(self) -> dict:
        return unflatten(self.config, self.params)

    def copy(self) -> "Network":
        net = Network(self.config, self._params.copy(), self.init_params)
        return net

    def __repr__(self):
        return f"Network(layers={self.config.layer_sizes}, params={self.config.n_params})"


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_network(config: MLPConfig, seed) -> Network:
    """Deterministic initialization from ``(config, seed)``.

    ``seed`` may be an int or a ``numpy.random.SeedSequence``.
    """
    rng = np.random.default_rng(seed)
    parts = {}
    last = len(config.layer_sizes) - 2
    for name, layer, shape, _ in config.layout:
        if name in ("W", "Wv"):
            if config.init_scheme == "orthogonal_scaled":
                if name == "Wv":
                    gain = 1.0
                elif layer == last:
                    gain = config.output_gain
                else:
                    gain = np.sqrt(2.0)
                parts[(name, layer)] = _orthogonal(rng, shape, gain)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                parts[(name, layer)] = rng.uniform(-bound, bound, size=shape)
        elif name in ("b", "bv"):
            if config.init_scheme == "uniform_fanin":
                fan_in = config.layer_sizes[layer] if name == "b" else config.layer_sizes[-2]
                bound = 1.0 / np.sqrt(fan_in)
                parts[(name, layer)] = rng.uniform(-bound, bound, size=shape)
            else:
                parts[(name, layer)] = np.zeros(shape)
        elif name == "gain":
            parts[(name, layer)] = np.ones(shape)
        else:
            parts[(name, layer)] = np.zeros(shape)
    return Network(config, flatten(config, parts))


def _act(kind: str, y: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(y)
    return np.maximum(y, 0.0)


def _act_grad(kind: str, y: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    # subgradient at 0 is 0
    return (y > 0.0).astype(np.float64)


@dataclass
class BatchOutput:
    outputs: np.ndarray
    values: Optional[np.ndarray] = None
    cache: Optional[list] = field(default=None, repr=False)
    inputs: Optional[np.ndarray] = field(default=None, repr=False)
    version: int = -1
    net_id: int = -1

    @property
    def hidden(self) -> list:
        """Post-activation hidden layers, one ``(batch, width)`` array each."""
        return [c["a"] for c in self.cache]


def _check_input(config: MLPConfig, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise DimensionError(f"expected (batch, {config.input_dim}) input, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("non-finite network input")
    return X


def forward(net: Network, X, params: Optional[np.ndarray] = None) -> BatchOutput:
    """Evaluate the network on a batch of rows.

    ``params`` evaluates the same architecture at another parameter vector
    without touching ``net``; such outputs carry no usable backward cache.
    """
    config = net.config
    X = _check_input(config, X)
    p = unflatten(config, net.params if params is None else np.asarray(params, dtype=np.float64))
    a = X
    cache = []
    for l in range(config.n_hidden):
        z = a @ p[("W", l)] + p[("b", l)]
        entry = {"a_in": a}
        if config.use_layer_norm:
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            floored = var <= LN_VAR_FLOOR
            s = np.sqrt(np.maximum(var, LN_VAR_FLOOR))
            zhat = (z - mu) / s
            y = zhat * p[("gain", l)] + p[("shift", l)]
            entry.update(zhat=zhat, s=s, floored=floored)
        else:
            y = z
        a = _act(config.activation, y)
        entry.update(y=y, a=a)
        cache.append(entry)
    last = len(config.layer_sizes) - 2
    out = a @ p[("W", last)] + p[("b", last)]
    values = None
    if config.value_head is not None:
        v = a @ p[("Wv", -1)] + p[("bv", -1)]
        values = v[:, 0] if config.value_head == 1 else v
    own = params is None
    return BatchOutput(
        outputs=out,
        values=values,
        cache=cache,
        inputs=X,
        version=net.version if own else -1,
        net_id=id(net) if own else -1,
    )


def backward(net: Network, batch: BatchOutput, d_output, d_value=None) -> np.ndarray:
    """Mean-over-batch gradient of ``sum_i d_output[i] . f(x_i)`` (plus the value head term).

    ``d_output`` holds per-sample derivatives of a per-sample loss with respect
    to the network outputs; the batch mean is taken here.
    """
    if batch is None or batch.cache is None or batch.inputs is None:
        raise StateError("backward needs the cache of a forward pass")
    if batch.net_id != id(net) or batch.version != net.version:
        raise StateError("forward cache is stale: parameters changed since the forward pass")
    config = net.config
    B = batch.inputs.shape[0]
    d_output = np.asarray(d_output, dtype=np.float64)
    if d_output.ndim == 1 and config.output_dim == 1:
        d_output = d_output[:, None]
    if d_output.shape != batch.outputs.shape:
        raise DimensionError(f"d_output shape {d_output.shape} != outputs {batch.outputs.shape}")
    p = net.parts()
    grad = np.zeros(config.n_params)
    g = unflatten(config, grad)
    last = len(config.layer_sizes) - 2
    a_last = batch.cache[-1]["a"] if batch.cache else batch.inputs

    delta = d_output / B
    g[("W", last)][...] = a_last.T @ delta
    g[("b", last)][...] = delta.sum(axis=0)
    da = delta @ p[("W", last)].T
    if d_value is not None:
        if config.value_head is None:
            raise DimensionError("network has no value head")
        dv = np.asarray(d_value, dtype=np.float64)
        if dv.ndim == 1:
            dv = dv[:, None]
        if dv.shape != (B, config.value_head):
            raise DimensionError(f"d_value shape {dv.shape} does not match the value head")
        dv = dv / B
        g[("Wv", -1)][...] = a_last.T @ dv
        g[("bv", -1)][...] = dv.sum(axis=0)
        da = da + dv @ p[("Wv", -1)].T

    for l in range(config.n_hidden - 1, -1, -1):
        c = batch.cache[l]
        dy = da * _act_grad(config.activation, c["y"], c["a"])
        if config.use_layer_norm:
            zhat = c["zhat"]
            g[("gain", l)][...] = (dy * zhat).sum(axis=0)
            g[("shift", l)][...] = dy.sum(axis=0)
            dzhat = dy * p[("gain", l)]
            mean_d = dzhat.mean(axis=1, keepdims=True)
            mean_dz = (dzhat * zhat).mean(axis=1, keepdims=True)
            # floored rows: the scale is a constant, so only the centering term remains
            mean_dz = np.where(c["floored"], 0.0, mean_dz)
            dz = (dzhat - mean_d - zhat * mean_dz) / c["s"]
        else:
            dz = dy
        g[("W", l)][...] = c["a_in"].T @ dz
        g[("b", l)][...] = dz.sum(axis=0)
        if l > 0:
            da = dz @ p[("W", l)].T
    return grad


Adjoint = Union[np.ndarray, Callable[[BatchOutput], np.ndarray]]


def grad_of_scalar(net: Network, X, adjoint: Adjoint) -> np.ndarray:
    """Parameter gradient of a mean per-sample scalar loss on ``X``.

    ``adjoint`` is either the per-sample ``dL/d output`` matrix or a callable
    mapping the forward result to it.
    """
    out = forward(net, X)
    d = adjoint(out) if callable(adjoint) else adjoint
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 0:
        d = np.full(out.outputs.shape, float(d))
    return backward(net, out, d)


def snapshot_outputs(net: Network, X, transform: Optional[Callable] = None,
                     params: Optional[np.ndarray] = None) -> np.ndarray:
    """Detached copy of the (optionally transformed) outputs on ``X``."""
    out = forward(net, X, params=params).outputs
    if transform is not None:
        out = transform(out)
    return np.array(out, copy=True)


def per_sample_grads(net: Network, X, adjoint_rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Matrix ``(n, d)`` whose row i is the gradient of ``adjoint_rows[i] . f(x_i)``.

    With a scalar-output network and no adjoint this is ``grad f(x_i)``.
    """
    X = _check_input(net.config, X)
    n = X.shape[0]
    if adjoint_rows is None:
        adjoint_rows = np.ones((n, net.config.output_dim))
    rows = np.empty((n, net.config.n_params))
    for i in range(n):
        rows[i] = grad_of_scalar(net, X[i:i + 1], adjoint_rows[i:i + 1])
    return rows


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_vjp(logp: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull ``dL/d logp`` back to ``dL/d logits`` through log-softmax."""
    return upstream - np.exp(logp) * upstream.sum(axis=-1, keepdims=True)


def hidden_activations(net: Network, X) -> list:
    return forward(net, X).hidden


def layer_sizes_for(input_dim: int, hidden: Sequence[int], output_dim: int) -> tuple:
    return (int(input_dim), *(int(h) for h in hidden), int(output_dim))
