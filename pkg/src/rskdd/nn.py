"""A small reverse-mode autograd over numpy arrays, shared MLPs and SGD.

Only the operations the keypoint/descriptor pipeline needs are provided.
Every op records a closure that maps the output gradient to parent
gradients; :func:`backward` replays them in reverse topological order.
"""

from __future__ import annotations

import io
import json
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, GraphError

# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, p): return power(self, p)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=-1, keepdims=False): return max_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    @property
    def T(self): return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that contributed to a scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GraphError("backward needs a scalar Tensor")
    if not loss.requires_grad:
        raise GraphError("no recorded forward pass leads to this loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _pair(a, b):
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root whose gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g / (2 * safe), 0.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo).astype(a.dtype), (a,), lambda g: (g * mask,))


def softplus_np(x):
    """ln(1 + e^x), evaluated as x + ln(1 + e^-x) for positive x."""
    x = np.asarray(x)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def sigmoid_np(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = softplus_np(a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * sigmoid_np(a.data),))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_(a, axis=-1, keepdims=False) -> Tensor:
    """Max along one axis; gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if not (a.requires_grad and _grad_enabled):
        return Tensor(a.data.max(axis=axis, keepdims=keepdims))
    arg_k = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg_k, g, axis=axis)
        return (full,)
    return _make(out, (a,), bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(xs: Sequence, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, indices, axis=0) -> Tensor:
    """Gather along ``axis`` with an integer index array (scatter-add gradient)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * (axis % a.ndim) + (indices,), g)
        return (full,)
    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data @ b.data

    def bw(g):
        # promote vectors to matrices so one batched rule covers every case
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = np.asarray(g)
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(b.shape)
        return ga, gb
    return _make(out, (a, b), bw)


def linear(x, W, b) -> Tensor:
    """Row-wise affine map ``x @ W + b`` over arbitrary leading axes.

    Leading axes are flattened so the weight gradient is a single GEMM.
    """
    x = as_tensor(x)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ W.data + b.data).reshape(*lead, W.shape[1])

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)
    return _make(out, (x, W, b), bw)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

ACTIVATIONS = {"relu": relu, "linear": lambda x: x}


class Mlp:
    """Shared (pointwise) MLP applied to the last axis.

    Hidden layers use ReLU, the last layer is linear unless ``activations``
    says otherwise.
    """

    def __init__(self, in_dim: int, widths: Sequence[int], rng: np.random.Generator,
                 activations: Sequence[str] | None = None, dtype=np.float32):
        self.in_dim = int(in_dim)
        self.widths = [int(w) for w in widths]
        if activations is None:
            activations = ["relu"] * (len(self.widths) - 1) + ["linear"]
        if len(activations) != len(self.widths):
            raise ValueError("one activation tag per layer is required")
        self.activations = list(activations)
        self.params: list[Tensor] = []
        fan_in = self.in_dim
        for w in self.widths:
            limit = np.sqrt(6.0 / fan_in)
            W = rng.uniform(-limit, limit, size=(fan_in, w)).astype(dtype)
            self.params += [Tensor(W, requires_grad=True),
                            Tensor(np.zeros(w, dtype=dtype), requires_grad=True)]
            fan_in = w

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def layers(self):
        return [(self.params[2 * i], self.params[2 * i + 1], act)
                for i, act in enumerate(self.activations)]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input columns, got {x.shape[-1]}")
        for W, b, act in self.layers():
            x = ACTIVATIONS[act](linear(x, W, b))
        return x

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "widths": self.widths, "activations": self.activations}


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class SGD:
    """SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray] | None = None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter is required")
        for p, v, g in zip(self.params, self.velocity, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype, copy=False)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float = 1e-3,
             momentum: float = 0.9, velocity: list[np.ndarray] | None = None):
    """Functional form of one momentum-SGD update; returns the velocity buffers."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step(grads)
    return opt.velocity


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RSKDDCKP"
CHECKPOINT_VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


def write_checkpoint(path, config: dict, arrays: Sequence[np.ndarray], dtype: str = "f4"):
    """Magic, version, JSON config echo, then shape-prefixed row-major arrays."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    header = json.dumps({"dtype": dtype, "config": config}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.asarray(a, dtype=_DTYPES[dtype])
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, list[np.ndarray], str]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(raw[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    dt = np.dtype(_DTYPES[header["dtype"]])
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape).copy())
        off += n * dt.itemsize
    return header["config"], arrays, header["dtype"]
