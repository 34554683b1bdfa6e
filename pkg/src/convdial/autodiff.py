"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float32/float64 ndarray and, when ``requires_grad`` is
set, records the operations applied to it.  Calling ``backward()`` on a
scalar result walks the recorded graph in reverse topological order and
accumulates gradients into every participating tensor.

The engine is deliberately small: only the operations needed by the layer
and model code exist.  All arithmetic supports numpy broadcasting; the
corresponding gradient is summed back down to the parent's shape.  Graph
recording is disabled inside a ``no_grad()`` block, which is how the
evaluation paths avoid bookkeeping overhead.

Float64 tensors behave identically to float32 ones and are what the
finite-difference gradient checks run on.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense floating-point tensor with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

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
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient machinery -------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, what: str = "tensor"):
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def backward(self, grad=None, accumulate: bool = False):
        """Backpropagate from this scalar through the recorded graph.

        A second ``backward()`` on the same result is an error unless
        ``accumulate=True`` is passed explicitly.
        """
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise FloatingPointError("backward() on non-finite value")
        if self._backward_done and not accumulate:
            raise RuntimeError("backward() already ran for this result; pass accumulate=True to repeat")
        self._backward_done = True

        order = _topological_order(self)
        # non-leaf grads are per-pass scratch: reset them so a repeated
        # (accumulate) backward adds exactly one fresh gradient to leaves
        for node in order:
            if node._backward_fn is not None:
                node.grad = None
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        self.grad = seed
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def pow(self, p):
        return tpow(self, p)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def make_node(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Create a graph node; used by layers that implement custom backwards.

    ``backward_fn(grad)`` must accumulate gradients into the parents itself
    (via ``accumulate_grad``).  Recording is skipped when gradients are
    disabled or no parent requires them.
    """
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _topological_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and structural operations ----------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return make_node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(-g, b.shape))

    return make_node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return make_node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data / b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g / b.data, a.shape))
        accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_node(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            accumulate_grad(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            accumulate_grad(b, _unbroadcast(gb, b.shape))

    return make_node(out_data, (a, b), backward)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        accumulate_grad(a, g.reshape(orig))

    return make_node(out_data, (a,), backward)


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        accumulate_grad(a, g.transpose(inverse))

    return make_node(out_data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            accumulate_grad(a, full)

    return make_node(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate_grad(t, piece)

    return make_node(out_data, tuple(tensors), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            grad = np.broadcast_to(g, a.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            grad = np.broadcast_to(g_exp, a.shape)
        accumulate_grad(a, grad.astype(a.data.dtype, copy=True))

    return make_node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        accumulate_grad(a, g * out_data)

    return make_node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        accumulate_grad(a, g / a.data)

    return make_node(out_data, (a,), backward)


def tpow(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p

    def backward(g):
        accumulate_grad(a, g * p * a.data ** (p - 1.0))

    return make_node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    # gradient at exactly 0 is defined as 0
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        accumulate_grad(a, g * (a.data > 0))

    return make_node(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        accumulate_grad(a, g * ((a.data >= lo) & (a.data <= hi)))

    return make_node(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        accumulate_grad(a, out_data * (g - dot))

    return make_node(out_data, (a,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets`` under softmax.

    ``logits`` has shape (N, V); ``targets`` shape (N,).  Returns a tensor
    of shape (N,).  Computed with a shifted log-sum-exp for stability.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"expected (N, V) logits and (N,) targets, got {logits.shape} / {targets.shape}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=1, keepdims=True)
    log_probs = (x - m) - np.log(denom)
    rows = np.arange(x.shape[0])
    out_data = -log_probs[rows, targets]

    def backward(g):
        if logits.requires_grad:
            grad = e / denom
            grad[rows, targets] -= 1.0
            accumulate_grad(logits, grad * g[:, None])

    return make_node(out_data, (logits,), backward)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pure-numpy stable log-softmax, for evaluation paths."""
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def logmeanexp_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log of the mean of exponentials along ``axis``."""
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).mean(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)
