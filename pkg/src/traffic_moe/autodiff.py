"""Reverse-mode automatic differentiation on float64 numpy buffers.

Small tensor engine: each op builds a node with a backward closure, and
``backward()`` walks the graph in reverse topological order. Everything is
float64 and single-threaded, so fixed seeds give bit-identical training
trajectories.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Raising on the first non-finite value keeps op provenance; disable only for
# benchmarks.
nan_guard = True


class NumericError(RuntimeError):
    """A forward op produced NaN or infinity."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = None
        if nan_guard and op != "leaf" and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values produced by op '{op}'")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _node(data, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _needs_grad(*parents):
        out = Tensor(data, op=op, parents=parents)
        out._backward = backward
    else:
        out = Tensor(data, op=op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        # always copy: the incoming grad may alias the consumer's buffer
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad += grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, "div", (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _wrap(a), _wrap(b)
    out_data = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * take_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return _node(out_data, "maximum", (a, b), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node(out_data, "exp", (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(out_data, "log", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra & shaping
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(out_data, "matmul", (a, b), backward)


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b (bias broadcast over leading axes)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine inner dims differ: {x.shape} @ {w.shape}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        _accumulate(x, g @ w.data.T)
        flat_g = g.reshape(-1, g.shape[-1])
        flat_x = x.data.reshape(-1, x.shape[-1])
        _accumulate(w, flat_x.T @ flat_g)
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, "affine", (x, w, b), backward)


def var_linear(x, w) -> Tensor:
    """Per-group linear map: (..., V, I) x (V, I, O) -> (..., V, O)."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-2] != w.shape[0] or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"var_linear shapes differ: {x.shape} vs {w.shape}")
    out_data = np.einsum("...vi,vio->...vo", x.data, w.data)

    def backward(g):
        _accumulate(x, np.einsum("...vo,vio->...vi", g, w.data))
        flat_x = x.data.reshape(-1, *x.shape[-2:])
        flat_g = g.reshape(-1, *g.shape[-2:])
        _accumulate(w, np.einsum("nvi,nvo->vio", flat_x, flat_g))

    return _node(out_data, "var_linear", (x, w), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _node(out_data, "concat", tensors, backward)


def slice_axis(x, axis: int, start: int, length: int) -> Tensor:
    x = _wrap(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _node(out_data, "slice", (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(out_data, "reshape", (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    out_data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _node(out_data, "transpose", (x,), backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(out_data, "sum", (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / count, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / count, x.shape).copy())

    return _node(out_data, "mean", (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-safe

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _node(out_data, "sigmoid", (x,), backward)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out_data = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out_data * out_data))

    return _node(out_data, "tanh", (x,), backward)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = _wrap(x)
    neg = np.minimum(x.data, 0.0)
    out_data = np.where(x.data > 0, x.data, alpha * np.expm1(neg))

    def backward(g):
        local = np.where(x.data > 0, 1.0, alpha * np.exp(neg))
        _accumulate(x, g * local)

    return _node(out_data, "elu", (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - inner))

    return _node(out_data, "softmax", (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gain, bias)."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(bias, _unbroadcast(g, bias.shape))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out_data, "layer_norm", (x, gain, bias), backward)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    x = _wrap(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out_data = x.data * keep

    def backward(g):
        _accumulate(x, g * keep)

    return _node(out_data, "dropout", (x,), backward)


def embedding_lookup(table, index) -> Tensor:
    """Row lookup: table (V, D) indexed by an integer array of any shape."""
    table = _wrap(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"[{index.min()}, {index.max()}]")
    out_data = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        _accumulate(table, full)

    return _node(out_data, "embedding", (table,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


# ---------------------------------------------------------------------------
# parameter init & checkpoints
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so sub-streams stay reproducible."""
    return np.random.Generator(np.random.Philox(seed))


def init_uniform(rng: np.random.Generator, *shape: int, fan_in: int | None = None) -> Tensor:
    if fan_in is None:
        fan_in = shape[0] if len(shape) > 1 else shape[-1]
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def init_zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def save_params(params: dict[str, Tensor], directory: str | Path) -> None:
    """Write a manifest (names, shapes, dtype) plus one flat float64 blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    offset = 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.data, dtype=np.float64)
        manifest.append({
            "name": name,
            "shape": list(raw.shape),
            "dtype": "float64",
            "offset": offset,
            "size": int(raw.size),
        })
        blobs.append(raw.tobytes())
        offset += raw.size
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "params.bin").write_bytes(b"".join(blobs))


def load_params(directory: str | Path) -> dict[str, Tensor]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = np.frombuffer((directory / "params.bin").read_bytes(), dtype=np.float64)
    params: dict[str, Tensor] = {}
    for entry in manifest:
        start = entry["offset"]
        size = entry["size"]
        data = blob[start:start + size].reshape(entry["shape"]).copy()
        params[entry["name"]] = Tensor(data, requires_grad=True)
    return params
