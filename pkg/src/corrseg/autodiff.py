"""Minimal dense-tensor reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and, when gradients are requested,
records its parents plus a closure that routes the incoming gradient to
them.  Calling :meth:`Tensor.backward` on a scalar walks the graph once in
reverse topological order and populates ``grad`` on every reachable tensor
with ``requires_grad`` set.

Scalars are float64 by default; float32 can be requested per tensor for
cheaper training.  All documented tolerances assume float64.

A graph is confined to one logical thread between construction and
backward; tensors without gradient tracking are immutable by convention
and safe to share across threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import AutodiffError, NumericsError, ShapeError
from .rng import SplitMix64

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _broadcast_shape(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(
            f"shapes not broadcast-compatible: {a_shape} vs {b_shape}"
        ) from None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting trailing-dimension broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense n-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable[[np.ndarray], None]] = None
        self._done = False

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward -------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every requires_grad tensor reachable from self.

        Only scalar (single-element) losses are accepted, and a second call
        on the same output without :meth:`reset_backward` is rejected.
        """
        if self.size != 1:
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if self._done:
            raise AutodiffError(
                "backward already ran for this tensor; call reset_backward() "
                "or rebuild the graph"
            )
        self._done = True

        order = self._topo_order()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    def reset_backward(self) -> None:
        """Clear the backward-done flag and grads of this graph's nodes."""
        for node in self._topo_order():
            node.grad = None
        self._done = False

    def _topo_order(self) -> list:
        # Iterative DFS; graphs from long training steps exceed Python's
        # recursion limit.
        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(scale(self, -1.0), other)
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else int(
            np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        )
        return scale(tsum(self, axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(x: TensorLike, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, grad_fn, requires_grad) -> Tensor:
    out = Tensor(data)
    if requires_grad and _GRAD_ENABLED:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


# -- elementwise binary ops ------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), grad_fn, a.requires_grad or b.requires_grad)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), grad_fn, a.requires_grad or b.requires_grad)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), grad_fn, a.requires_grad or b.requires_grad)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), grad_fn, a.requires_grad or b.requires_grad)


def scale(a: TensorLike, c: float) -> Tensor:
    """Multiply by a host scalar (no constant node enters the graph)."""
    a = as_tensor(a)
    c = float(c)

    def grad_fn(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), grad_fn, a.requires_grad)


def add_scalar(a: TensorLike, c: float) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        a._accum(g)

    return _make(a.data + float(c), (a,), grad_fn, a.requires_grad)


# -- elementwise unary ops ---------------------------------------------------


def sin(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        a._accum(g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), grad_fn, a.requires_grad)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def grad_fn(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), grad_fn, a.requires_grad)


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), grad_fn, a.requires_grad)


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        a._accum(g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), grad_fn, a.requires_grad)


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    # Split by sign to avoid overflow in exp.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), grad_fn, a.requires_grad)


# -- reductions and softmax ---------------------------------------------------


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), grad_fn, a.requires_grad)


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max-subtraction for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return _make(out_data, (a,), grad_fn, a.requires_grad)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        a._accum(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), grad_fn, a.requires_grad)


# -- structural ops -----------------------------------------------------------


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape

    def grad_fn(g):
        a._accum(g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), grad_fn, a.requires_grad)


def transpose(a: TensorLike, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def grad_fn(g):
        a._accum(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), grad_fn, a.requires_grad)


def take(a: TensorLike, key) -> Tensor:
    """Basic (slice/integer) indexing; gradient scatters back."""
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accum(full)

    return _make(a.data[key], (a,), grad_fn, a.requires_grad)


def concat(tensors: Iterable[TensorLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        grad_fn,
        any(t.requires_grad for t in ts),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product of two 2-d tensors or batched 3-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul expects matching 2d/3d ranks, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accum(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b._accum(np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), grad_fn,
                 a.requires_grad or b.requires_grad)


# -- convolution ---------------------------------------------------------------


def _im2col_same(x: np.ndarray, k: int) -> np.ndarray:
    h, w, c = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    cols = np.empty((h, w, k * k * c), dtype=x.dtype)
    i = 0
    for dy in range(k):
        for dx in range(k):
            cols[:, :, i * c:(i + 1) * c] = xp[dy:dy + h, dx:dx + w, :]
            i += 1
    return cols


def conv2d(x: TensorLike, kernel: TensorLike) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    x: (H, W, C_in); kernel: (k, k, C_in, C_out) with k in {1, 3}.
    Output (H, W, C_out), differentiable w.r.t. both arguments.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects HWC input and kkIO kernel, got {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {kernel.shape[:2]}")
    if kernel.shape[2] != x.shape[2]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[2]}, kernel expects {kernel.shape[2]}"
        )
    h, w, c_in = x.shape
    c_out = kernel.shape[3]
    cols = _im2col_same(x.data, k)
    flat = cols.reshape(h * w, k * k * c_in)
    kflat = kernel.data.reshape(k * k * c_in, c_out)
    out_data = (flat @ kflat).reshape(h, w, c_out)

    def grad_fn(g):
        gflat = g.reshape(h * w, c_out)
        if kernel.requires_grad:
            kernel._accum((flat.T @ gflat).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (gflat @ kflat.T).reshape(h, w, k, k, c_in)
            p = (k - 1) // 2
            dxp = np.zeros((h + 2 * p, w + 2 * p, c_in), dtype=g.dtype)
            i = 0
            for dy in range(k):
                for dx in range(k):
                    dxp[dy:dy + h, dx:dx + w, :] += dcols[:, :, dy, dx, :]
                    i += 1
            x._accum(dxp[p:p + h, p:p + w, :] if p else dxp)

    return _make(out_data, (x, kernel), grad_fn, x.requires_grad or kernel.requires_grad)


# -- verification harness --------------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `f` must be scalar-valued.  Returns
    ``max_i |autodiff_i - central_i| / max(1, |central_i|)`` over all
    coordinates of `x`; raises NumericsError naming the first coordinate
    where a non-finite value is met.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise AutodiffError(f"check_gradients needs a scalar program, got {out.shape}")
    out.backward()
    auto = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(x).item()
            flat[i] = orig - h
            f_minus = f(x).item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            if not (math.isfinite(fd) and math.isfinite(auto.reshape(-1)[i])):
                raise NumericsError(f"non-finite gradient at coordinate {i}")
            err = abs(auto.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# -- parameters and optimization ---------------------------------------------------


def init_parameter(shape, fan_in: int, rng: SplitMix64, dtype=None) -> Tensor:
    """Centered uniform init scaled by 1/sqrt(fan_in), gradient-tracked."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    data = rng.uniform_array(shape, -bound, bound)
    if dtype is not None:
        data = data.astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_parameter(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


class SGD:
    """SGD with momentum and decoupled-from-nothing classic weight decay.

    update: buf = momentum*buf + grad + weight_decay*w;  w -= lr*buf
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            buf = self._buffers[name]
            buf *= self.momentum
            buf += p.grad + self.weight_decay * p.data
            p.data -= self.lr * buf
