"""Sequential dense networks with exact backpropagation.

Networks are described by an immutable :class:`MlpSpec` and evaluated against a
flat float64 parameter vector. Batch-norm running statistics live in a separate
``buffers`` vector so that parameters, gradients and optimizer moments all share
one flat layout.

Blocks: a new block starts at every dense layer after the first. A residual link
``(i, j)`` adds the output of block ``i`` to the output of block ``j``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import ClassVar, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

BCE_EPS = 1e-7


class NumericalError(ValueError):
    """Non-finite values appeared in a computation."""


PARAM_TAG = b"DPAGPV01"


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True
    kind: ClassVar[str] = "dense"

    @property
    def n_params(self) -> int:
        return self.out_dim * self.in_dim + (self.out_dim if self.bias else 0)

    def to_dict(self) -> dict:
        return {"kind": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim, "bias": self.bias}


@dataclass(frozen=True)
class Activation:
    name: str
    slope: float = 0.2
    kind: ClassVar[str] = "activation"

    def __post_init__(self):
        if self.name not in ("tanh", "sigmoid", "leaky_relu"):
            raise ValueError(f"unknown activation {self.name!r}")
        if self.name == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky_relu slope must lie in (0, 1)")

    n_params = 0

    def to_dict(self) -> dict:
        d = {"kind": self.name}
        if self.name == "leaky_relu":
            d["slope"] = self.slope
        return d


@dataclass(frozen=True)
class BatchNorm1d:
    dim: int
    momentum: float = 0.1
    epsilon: float = 1e-5
    kind: ClassVar[str] = "batchnorm1d"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("batchnorm epsilon must be positive")

    @property
    def n_params(self) -> int:
        return 2 * self.dim

    def to_dict(self) -> dict:
        return {"kind": "batchnorm1d", "dim": self.dim, "momentum": self.momentum,
                "epsilon": self.epsilon}


def tanh() -> Activation:
    return Activation("tanh")


def sigmoid() -> Activation:
    return Activation("sigmoid")


def leaky_relu(slope: float = 0.2) -> Activation:
    return Activation("leaky_relu", slope)


Layer = Union[Dense, Activation, BatchNorm1d]


def layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind == "dense":
        return Dense(int(d["in_dim"]), int(d["out_dim"]), bool(d.get("bias", True)))
    if kind == "batchnorm1d":
        return BatchNorm1d(int(d["dim"]), float(d.get("momentum", 0.1)), float(d.get("epsilon", 1e-5)))
    if kind == "leaky_relu":
        return Activation("leaky_relu", float(d.get("slope", 0.2)))
    return Activation(kind)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a sequential MLP with optional residual links between blocks."""

    layers: Tuple[Layer, ...]
    residual_links: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "residual_links", tuple(tuple(int(v) for v in l) for l in self.residual_links))
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if width is not None and layer.in_dim != width:
                    raise ValueError(f"layer {i}: in_dim {layer.in_dim} does not match width {width}")
                width = layer.out_dim
            elif isinstance(layer, BatchNorm1d):
                if width is not None and layer.dim != width:
                    raise ValueError(f"layer {i}: batchnorm dim {layer.dim} does not match width {width}")
                width = layer.dim
        if not any(isinstance(l, Dense) for l in self.layers):
            raise ValueError("an MlpSpec needs at least one dense layer")
        n_blocks = len(self.blocks)
        widths = self.block_widths
        for f, t in self.residual_links:
            if not 0 <= f < t < n_blocks:
                raise ValueError(f"residual link {(f, t)} must satisfy 0 <= from < to < {n_blocks}")
            if widths[f] != widths[t]:
                raise ValueError(f"residual link {(f, t)} joins widths {widths[f]} and {widths[t]}")

    @cached_property
    def in_dim(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
            if isinstance(layer, BatchNorm1d):
                return layer.dim
        raise AssertionError

    @cached_property
    def out_dim(self) -> int:
        return self.block_widths[-1]

    @cached_property
    def blocks(self) -> Tuple[Tuple[int, ...], ...]:
        blocks, current, seen_dense = [], [], False
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if seen_dense:
                    blocks.append(tuple(current))
                    current = []
                seen_dense = True
            current.append(i)
        blocks.append(tuple(current))
        return tuple(blocks)

    @cached_property
    def block_widths(self) -> Tuple[int, ...]:
        out, width = [], None
        for block in self.blocks:
            for i in block:
                layer = self.layers[i]
                if isinstance(layer, Dense):
                    width = layer.out_dim
                elif isinstance(layer, BatchNorm1d):
                    width = layer.dim
            out.append(width)
        return tuple(out)

    @cached_property
    def offsets(self) -> Tuple[int, ...]:
        """Start offset of every layer inside the flat parameter vector."""
        offs, pos = [], 0
        for layer in self.layers:
            offs.append(pos)
            pos += layer.n_params
        return tuple(offs)

    @cached_property
    def buffer_offsets(self) -> Tuple[int, ...]:
        offs, pos = [], 0
        for layer in self.layers:
            offs.append(pos)
            if isinstance(layer, BatchNorm1d):
                pos += 2 * layer.dim
        return tuple(offs)

    @cached_property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @cached_property
    def n_buffers(self) -> int:
        return sum(2 * l.dim for l in self.layers if isinstance(l, BatchNorm1d))

    @cached_property
    def has_batchnorm(self) -> bool:
        return any(isinstance(l, BatchNorm1d) for l in self.layers)

    def layout(self) -> list:
        """Per-layer offset table ``[(layer_index, name, offset, shape), ...]``."""
        table = []
        for i, (layer, off) in enumerate(zip(self.layers, self.offsets)):
            if isinstance(layer, Dense):
                table.append((i, "weight", off, (layer.out_dim, layer.in_dim)))
                if layer.bias:
                    table.append((i, "bias", off + layer.out_dim * layer.in_dim, (layer.out_dim,)))
            elif isinstance(layer, BatchNorm1d):
                table.append((i, "scale", off, (layer.dim,)))
                table.append((i, "shift", off + layer.dim, (layer.dim,)))
        return table

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) dense weights; unit scale, zero shift."""
        p = np.zeros(self.n_params)
        for layer, off in zip(self.layers, self.offsets):
            if isinstance(layer, Dense):
                bound = np.sqrt(1.0 / layer.in_dim)
                p[off:off + layer.n_params] = rng.uniform(-bound, bound, layer.n_params)
            elif isinstance(layer, BatchNorm1d):
                p[off:off + layer.dim] = 1.0
        return p

    def init_buffers(self) -> np.ndarray:
        b = np.zeros(self.n_buffers)
        for layer, off in zip(self.layers, self.buffer_offsets):
            if isinstance(layer, BatchNorm1d):
                b[off + layer.dim:off + 2 * layer.dim] = 1.0
        return b

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers],
                "residual_links": [list(l) for l in self.residual_links]}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(layer_from_dict(l) for l in d["layers"]),
                   tuple(tuple(l) for l in d.get("residual_links", ())))


def mlp(dims: Sequence[int], hidden: Activation, output: Optional[Activation] = None,
        bias: bool = True) -> MlpSpec:
    """Plain MLP ``dims[0] -> ... -> dims[-1]`` with one activation after each hidden layer."""
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense(a, b, bias))
        if i < len(dims) - 2:
            layers.append(hidden)
    if output is not None:
        layers.append(output)
    return MlpSpec(tuple(layers))


@dataclass
class ParamVector:
    """Flat parameter values tied to the layout of an :class:`MlpSpec`."""

    values: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameters must be finite")

    def to_bytes(self) -> bytes:
        return PARAM_TAG + struct.pack("<Q", self.values.size) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, spec: MlpSpec) -> "ParamVector":
        return cls(params_from_bytes(data), spec)


def params_from_bytes(data: bytes) -> np.ndarray:
    if data[:len(PARAM_TAG)] != PARAM_TAG:
        raise ValueError("unrecognised parameter blob layout tag")
    (n,) = struct.unpack("<Q", data[len(PARAM_TAG):len(PARAM_TAG) + 8])
    body = data[len(PARAM_TAG) + 8:]
    if len(body) != 8 * n:
        raise ValueError(f"parameter blob holds {len(body)} bytes, expected {8 * n}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


@dataclass
class Tape:
    """Activation record of one forward pass."""

    mode: str
    caches: list
    buffers: np.ndarray
    n_rows: int
    spec: MlpSpec = field(repr=False)


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


def forward(spec: MlpSpec, params, batch, mode: str = "train",
            buffers: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Tape]:
    """Evaluate the network on a batch.

    In train mode batch-norm layers normalise with batch statistics and the
    returned tape carries updated running statistics (``tape.buffers``); the
    input ``buffers`` array is never modified. Eval mode uses the running
    statistics and is a pure function.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    p = _values(params)
    if p.shape != (spec.n_params,):
        raise ValueError(f"parameter vector has shape {p.shape}, spec needs ({spec.n_params},)")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"batch of shape {x.shape} does not match input width {spec.in_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("batch contains non-finite values")
    buf = spec.init_buffers() if buffers is None else np.asarray(buffers, dtype=np.float64)
    if mode == "train" and spec.has_batchnorm:
        buf = buf.copy()

    caches = [None] * len(spec.layers)
    block_out = []
    h = x
    for b, block in enumerate(spec.blocks):
        for i in block:
            h, caches[i] = _layer_forward(spec, i, p, buf, h, mode)
        for f, t in spec.residual_links:
            if t == b:
                h = h + block_out[f]
        block_out.append(h)
    return h, Tape(mode, caches, buf, x.shape[0], spec)


def _layer_forward(spec, i, p, buf, h, mode):
    layer = spec.layers[i]
    off = spec.offsets[i]
    if isinstance(layer, Dense):
        W = p[off:off + layer.out_dim * layer.in_dim].reshape(layer.out_dim, layer.in_dim)
        y = h @ W.T
        if layer.bias:
            y = y + p[off + layer.out_dim * layer.in_dim:off + layer.n_params]
        return y, h
    if isinstance(layer, BatchNorm1d):
        gamma = p[off:off + layer.dim]
        beta = p[off + layer.dim:off + 2 * layer.dim]
        boff = spec.buffer_offsets[i]
        rm = buf[boff:boff + layer.dim]
        rv = buf[boff + layer.dim:boff + 2 * layer.dim]
        if mode == "train":
            n = h.shape[0]
            mu = h.mean(axis=0)
            var = h.var(axis=0)
            unbiased = var * n / (n - 1) if n > 1 else var
            rm *= 1.0 - layer.momentum
            rm += layer.momentum * mu
            rv *= 1.0 - layer.momentum
            rv += layer.momentum * unbiased
        else:
            mu, var = rm, rv
        inv_std = 1.0 / np.sqrt(var + layer.epsilon)
        xhat = (h - mu) * inv_std
        return gamma * xhat + beta, (xhat, inv_std, mode)
    if layer.name == "tanh":
        y = np.tanh(h)
        return y, y
    if layer.name == "sigmoid":
        y = expit(h)
        return y, y
    return np.where(h > 0, h, layer.slope * h), h


def backward(spec: MlpSpec, params, tape: Tape, output_grad, *, per_example: bool = False,
             want_param_grad: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """Backpropagate ``output_grad`` through the recorded forward pass.

    Returns ``(param_grad, input_grad)``: the exact derivatives of
    ``sum(output_grad * output)`` over the batch. With ``per_example=True`` the
    parameter gradient has shape ``(batch, n_params)``; this is refused for
    train-mode batch-norm since examples are coupled through batch statistics.
    """
    if tape.spec != spec:
        raise ValueError("tape was recorded with a different spec")
    p = _values(params)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != (tape.n_rows, spec.out_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match ({tape.n_rows}, {spec.out_dim})")
    if per_example and tape.mode == "train" and spec.has_batchnorm:
        raise ValueError("per-example gradients are undefined through train-mode batchnorm")
    grad = None
    if want_param_grad:
        grad = np.zeros((tape.n_rows, spec.n_params) if per_example else spec.n_params)

    n_blocks = len(spec.blocks)
    acc = [None] * n_blocks
    acc[-1] = g
    input_grad = None
    for b in range(n_blocks - 1, -1, -1):
        gb = acc[b]
        for f, t in spec.residual_links:
            if t == b:
                acc[f] = gb if acc[f] is None else acc[f] + gb
        for i in reversed(spec.blocks[b]):
            gb = _layer_backward(spec, i, p, tape.caches[i], gb, grad, per_example)
        if b > 0:
            acc[b - 1] = gb if acc[b - 1] is None else acc[b - 1] + gb
        else:
            input_grad = gb
    return grad, input_grad


def _layer_backward(spec, i, p, cache, g, grad, per_example):
    layer = spec.layers[i]
    off = spec.offsets[i]
    if isinstance(layer, Dense):
        h = cache
        nw = layer.out_dim * layer.in_dim
        W = p[off:off + nw].reshape(layer.out_dim, layer.in_dim)
        if grad is not None:
            if per_example:
                grad[:, off:off + nw] = np.einsum("bo,bi->boi", g, h).reshape(g.shape[0], nw)
                if layer.bias:
                    grad[:, off + nw:off + layer.n_params] = g
            else:
                grad[off:off + nw] = (g.T @ h).ravel()
                if layer.bias:
                    grad[off + nw:off + layer.n_params] = g.sum(axis=0)
        return g @ W
    if isinstance(layer, BatchNorm1d):
        xhat, inv_std, mode = cache
        gamma = p[off:off + layer.dim]
        if grad is not None:
            if per_example:
                grad[:, off:off + layer.dim] = g * xhat
                grad[:, off + layer.dim:off + 2 * layer.dim] = g
            else:
                grad[off:off + layer.dim] = (g * xhat).sum(axis=0)
                grad[off + layer.dim:off + 2 * layer.dim] = g.sum(axis=0)
        dxhat = g * gamma
        if mode == "eval":
            return dxhat * inv_std
        n = g.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    if layer.name in ("tanh",):
        return g * (1.0 - cache * cache)
    if layer.name == "sigmoid":
        return g * cache * (1.0 - cache)
    return np.where(cache > 0, g, layer.slope * g)


def bce_loss(pred, target) -> Tuple[float, np.ndarray]:
    """Binary cross entropy summed over all entries, with its gradient wrt ``pred``.

    ``pred`` is clamped to ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    loss = -float(np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)))
    return loss, (p - t) / (p * (1.0 - p))


@dataclass
class OptimizerState:
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.99
    epsilon: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step_count: int = 0

    def config(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "adam":
            d.update(beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)
        elif self.kind == "rmsprop":
            d.update(alpha=self.alpha, epsilon=self.epsilon)
        return d


def make_optimizer(kind: str, n_params: int, **constants) -> OptimizerState:
    if kind not in ("sgd", "adam", "rmsprop"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind=kind, **constants)
    if kind == "adam":
        state.m = np.zeros(n_params)
        state.v = np.zeros(n_params)
    elif kind == "rmsprop":
        state.v = np.zeros(n_params)
    return state


def optimizer_step(state: OptimizerState, params, grad, lr: float) -> Tuple[np.ndarray, OptimizerState]:
    """One update; returns new parameters and a new state (inputs are left untouched)."""
    theta = _values(params)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {theta.shape}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    t = state.step_count + 1
    new = OptimizerState(state.kind, state.beta1, state.beta2, state.alpha, state.epsilon,
                         state.m, state.v, t)
    if state.kind == "sgd":
        return _check_finite(theta - lr * g), new
    if state.kind == "adam":
        new.m = state.beta1 * state.m + (1.0 - state.beta1) * g
        new.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        m_hat = new.m / (1.0 - state.beta1 ** t)
        v_hat = new.v / (1.0 - state.beta2 ** t)
        return _check_finite(theta - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)), new
    new.v = state.alpha * state.v + (1.0 - state.alpha) * g * g
    return _check_finite(theta - lr * g / (np.sqrt(new.v) + state.epsilon)), new


def _check_finite(theta: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(theta)):
        raise NumericalError("optimizer produced non-finite parameters")
    return theta


@dataclass
class Network:
    """A spec together with its current parameters and batch-norm buffers."""

    spec: MlpSpec
    params: np.ndarray
    buffers: np.ndarray

    @classmethod
    def initialise(cls, spec: MlpSpec, rng: np.random.Generator) -> "Network":
        return cls(spec, spec.init_params(rng), spec.init_buffers())

    def forward(self, x, mode: str = "train", commit: bool = True):
        out, tape = forward(self.spec, self.params, x, mode, self.buffers)
        if commit and mode == "train":
            self.buffers = tape.buffers
        return out, tape

    def backward(self, tape: Tape, output_grad, **kw):
        return backward(self.spec, self.params, tape, output_grad, **kw)

    def __call__(self, x) -> np.ndarray:
        return forward(self.spec, self.params, x, "eval", self.buffers)[0]
