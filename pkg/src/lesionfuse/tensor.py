"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op records a node on the tape (a monotonically
increasing sequence number plus a closure holding the saved forward
context).  :func:`backward` walks the reachable nodes in reverse tape order,
so gradient accumulation order is fixed and runs are bit-reproducible.

Training uses 32-bit reals.  Gradient checks switch to 64-bit with
``with precision(np.float64): ...``.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError, StateError

_state = threading.local()
_seq = itertools.count()

Number = Union[int, float]


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    previous = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad():
    """Disable tape recording (inference)."""
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    """N-dimensional array of reals with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.array(data, dtype=dtype or get_dtype())
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._node = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


TensorLike = Union[Tensor, np.ndarray, Number]


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor],
            backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output in {op}")
    out = Tensor._wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, "add", (a, b), bw)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, "sub", (a, b), bw)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """Broadcasting product; see :func:`elementwise_mul` for the strict form."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, "mul", (a, b), bw)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: {a.shape} vs {b.shape}")
    return mul(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    data = a.data * a.data.dtype.type(factor)

    def bw(g):
        return (g * g.dtype.type(factor),)

    return _result(data, "scale", (a,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, x.data.dtype.type(0))

    def bw(g):
        return (g * mask,)

    return _result(data, "relu", (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    data = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)

    def bw(g):
        return (g * data * (1 - data),)

    return _result(data, "sigmoid", (x,), bw)


def clamped_log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """``log(max(x, floor))``; zero gradient where the clamp is active."""
    active = x.data > floor
    safe = np.where(active, x.data, x.data.dtype.type(floor))
    data = np.log(safe)

    def bw(g):
        return (np.where(active, g / safe, 0).astype(g.dtype, copy=False),)

    return _result(data, "clamped_log", (x,), bw)


# ----------------------------------------------------------------------------
# reductions and reshaping


def tsum(x: Tensor, axis=None) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis), dtype=x.data.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(data, "sum", (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.sum() / x.data.dtype.type(n), dtype=x.data.dtype)

    def bw(g):
        return (np.full(x.shape, g / g.dtype.type(n), dtype=g.dtype),)

    return _result(data, "mean", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {x.shape} -> {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(data, "reshape", (x,), bw)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, "concat", tensors, bw)


# ----------------------------------------------------------------------------
# neural layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` N×D and ``weight`` D×M."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    return _result(data, "linear", inputs, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OCkk weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {o} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    # im2col laid out as (C, kh, kw, N, Ho, Wo) so both passes are single GEMMs
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i: i + (ho - 1) * stride + 1: stride,
                               j: j + (wo - 1) * stride + 1: stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray((w2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i: i + (ho - 1) * stride + 1: stride,
                    j: j + (wo - 1) * stride + 1: stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        grads = (np.ascontiguousarray(gx), gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(out, "conv2d", inputs, bw)


def _pool_bounds(size: int, out: int):
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over contiguous windows ``[floor(i*H/oh), ceil((i+1)*H/oh))``."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive_avg_pool: output {out_h}x{out_w} for input {h}x{w}")
    rows, cols = _pool_bounds(h, out_h), _pool_bounds(w, out_w)
    if out_h == 1 and out_w == 1:
        data = x.data.mean(axis=(2, 3), keepdims=True)
    else:
        data = np.empty((n, c, out_h, out_w), dtype=x.data.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = g.dtype.type((r1 - r0) * (c1 - c0))
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return _result(data, "adaptive_avg_pool", (x,), bw)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError("nearest_upsample: factor must be >= 1")
    if factor == 1:
        data = x.data.copy()
    else:
        data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        if factor == 1:
            return (g,)
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(data, "nearest_upsample", (x,), bw)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of an N×K tensor, max-subtracted."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects N×K with K >= 2, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, "softmax", (logits,), bw)


# ----------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and is reachable.

    The tape segment behind ``loss`` is consumed: calling again raises
    :class:`StateError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss was not produced by a taped forward pass")
    if loss._node.consumed:
        raise StateError("tape already consumed by a previous backward")

    nodes = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        if node.consumed:
            raise StateError(f"tape node {node.op} already consumed")
        nodes[node.seq] = node
        stack.extend(t._node for t in node.inputs if t._node is not None)

    grads = {loss._node.seq: np.ones(loss.shape, dtype=loss.data.dtype)}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = grads.pop(seq, None)
        if g is not None:
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericError(f"non-finite gradient in backward of {node.op}")
                if t._node is not None:
                    prev = grads.get(t._node.seq)
                    grads[t._node.seq] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype)
                else:
                    t.grad += gi
        node.consumed = True
        node.backward_fn = None
        node.inputs = ()
