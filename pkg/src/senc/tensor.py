"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records a node with a monotonically increasing
sequence number.  Creation order is a topological order, so ``backward`` can
walk the reachable nodes in descending sequence order and visit each one
exactly once after all of its consumers.

Broadcasting is deliberately limited to scalar-with-tensor and equal shapes.
Row-wise bias additions go through :func:`linear` instead.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DomainError, ShapeError

_seq = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Shaped float64 array that can take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_seq) if requires_grad else -1
        self._released = False

    # -- array-ish helpers -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._seq = next(_seq)
        out._parents = parents
        out._backward = fn
    return out


class Tape:
    """The nodes reachable from a loss, in the order ``backward`` visits them."""

    def __init__(self, loss: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise ContractError("backward already ran on this graph; re-run the forward pass first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = Tape(loss)
    buffers: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in tape.nodes:
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = buffers.get(key)
            buffers[key] = pg if prev is None else prev + pg
        node._backward = None
        node._parents = ()
        node._released = True


# -- elementwise -------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only scalar or equal-shape broadcasting)")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b), lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (_fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(~(a.data > 0)):
        raise DomainError("log of a non-positive or NaN value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 0.0:
        return _node(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),))
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError(f"negative base with non-integer exponent {p}")
    if p < 0 and np.any(a.data == 0):
        raise DomainError(f"zero base with negative exponent {p}")
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return _node(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


# -- reductions and shape ops ------------------------------------------------

def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in parts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes {[t.shape for t in parts]}: {exc}") from None
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(a: Tensor, key) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    out = a.data[key]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out), (a,), back)


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets; empty buckets are zero."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeError(f"segment ids {segments.shape} do not match rows of {a.shape}")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)
    return _node(out, (a,), lambda g: (g[segments],))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    if b is None:
        return matmul(x, w)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    out = x.data @ w.data + b.data
    return _node(out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def sparse_matmul(m: sp.csr_matrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor (used for interpolation)."""
    if x.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse matmul dimension mismatch: {m.shape} @ {x.shape}")
    mt = m.T.tocsr()
    return _node(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(a.data)):
        raise DomainError("softmax of NaN input")
    if a.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)
    return _node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation over the last axis with a learned affine."""
    mu = x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(out, (x, gain, bias), back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution over a channel-last ``(H, W, C_in)`` map.

    ``w`` has shape ``(kh, kw, C_in, C_out)``; zero padding of ``pad`` pixels.
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} are incompatible")
    kh, kw, cin, cout = w.shape
    h, wd, _ = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.stack(
        [xp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] for i, j in offsets],
        axis=2,
    ).reshape(ho * wo, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm + b.data).reshape(ho, wo, cout)

    def back(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(ho, wo, kh * kw, cin)
        gxp = np.zeros_like(xp)
        for k, (i, j) in enumerate(offsets):
            gxp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, k]
        gx = gxp[pad:pad + h, pad:pad + wd]
        return gx, gw, g2.sum(axis=0)

    return _node(out, (x, w, b), back)
