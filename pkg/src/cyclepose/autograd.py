"""Small reverse-mode automatic differentiation engine over numpy arrays.

Only the operators needed by the pose transformer and its losses are
provided. Shapes are explicit: the only broadcasting supported is adding a
trailing-shape tensor to a batched one (bias / positional rows).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEBUG = False

# tanh-approximation GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """When on, every op checks its output for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


def set_deterministic(flag: bool = True) -> None:
    """Pin BLAS to one thread so accumulation order never changes between runs."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1 if flag else None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. ``b`` may match a trailing slice of ``a``'s shape (row-wise add)."""
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    bshape = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    return Tensor(x.data)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715."""
    xd = x.data
    x2 = xd * xd
    inner = GELU_C * (xd + GELU_A * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def take(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), bw)


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis."""
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. For ndim > 2 both operands must share leading batch dims."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2) if need_a else None,
                np.swapaxes(ad, -1, -2) @ g if need_b else None)

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n]); leading dims are flattened into rows."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    wd = w.data
    need_x = x.requires_grad

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if need_x else None
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (w.shape[1],)), parents, bw)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead_axes)
        gbeta = g.sum(axis=lead_axes)
        gh = g * gd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- reductions / losses

def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    _check_same(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray((diff * diff).sum() / n, dtype=diff.dtype)

    def bw(g):
        ga = diff * (g * diff.dtype.type(2.0 / n))
        return ga, -ga

    return _make(val, (a, b), bw)


def add_scalars(terms: Iterable[Tensor], weights: Optional[Iterable[float]] = None) -> Tensor:
    """Weighted sum of scalar tensors, sum_i w_i t_i."""
    terms = list(terms)
    if not terms:
        raise GraphError("add_scalars needs at least one term")
    ws = [1.0] * len(terms) if weights is None else [float(w) for w in weights]
    dtype = terms[0].dtype
    val = np.asarray(sum(dtype.type(w) * t.data for w, t in zip(ws, terms)), dtype=dtype)
    return _make(val, terms, lambda g: tuple(g * dtype.type(w) for w in ws))


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
