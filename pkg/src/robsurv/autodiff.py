"""Dense float64 tensors with reverse-mode automatic differentiation.

A flat, execution-ordered tape of primitive records is kept per process
(`Graph`).  `backward` walks the tape once in reverse and accumulates
adjoints into per-tensor ``grad`` buffers, so data-dependent structure
(nearest-codebook selection, per-bin masks) is differentiated exactly as
executed.  Calling `backward` again on an intact tape first clears every
grad it is about to touch and therefore reproduces identical results.

Rules kept deliberately narrow:

* float64 everywhere; any primitive that produces a non-finite value
  raises ``NumericsError`` instead of letting NaN/Inf propagate.
* broadcasting is restricted to leading-axis and trailing-singleton
  patterns, which keeps every backward rule a sum over an axis prefix
  or suffix followed by a reshape.
* ``detach``, ``straight_through`` and ``clip_passthrough`` are the only
  primitives whose declared Jacobian differs from the true local
  derivative of their forward map; everything else is checkable against
  central finite differences.

Recording is disabled inside a ``no_grad()`` block, so forward evaluation
of a frozen model allocates no tape and is safe to run concurrently.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, NumericsError, ShapeError

__all__ = [
    "Tensor", "Graph", "active_graph", "reset_graph", "no_grad", "backward",
    "as_tensor", "zeros", "full", "uniform", "normal",
    "add", "sub", "mul", "div", "matmul",
    "exp", "log", "sigmoid", "relu", "softmax", "l2norm",
    "concat", "reshape", "transpose", "slice_along", "take_rows",
    "detach", "straight_through", "clip_passthrough",
]


class Graph:
    """Execution-ordered tape of recorded primitive applications."""

    __slots__ = ("records",)

    def __init__(self) -> None:
        # each record is (output, inputs, pull) where pull maps the output
        # adjoint to one gradient array (or None) per input
        self.records: list[tuple] = []

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()


# graph state is per-thread so read-only inference can run concurrently
_STATE = threading.local()


def _state() -> threading.local:
    if not hasattr(_STATE, "graph"):
        _STATE.graph = Graph()
        _STATE.grad_enabled = True
    return _STATE


def active_graph() -> Graph:
    return _state().graph


def reset_graph() -> None:
    """Drop every recorded operation (start of a fresh training step)."""
    _state().graph.reset()


@contextmanager
def no_grad():
    """Suspend tape recording; values are computed, gradients are not."""
    st = _state()
    previous = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = previous


class Tensor:
    """Dense float64 array plus an optional adjoint buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_mean(self, axis, keepdims)

    def max(self, axis=None) -> "Tensor":
        return _reduce_max(self, axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    return out


def as_tensor(value) -> Tensor:
    """Coerce scalars / arrays to a constant Tensor; pass Tensors through."""
    if isinstance(value, Tensor):
        return value
    return _wrap(np.asarray(value, dtype=np.float64))


def _record(out: Tensor, inputs: tuple, pull) -> Tensor:
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.graph.records.append((out, inputs, pull))
    return out


def _ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced a non-finite value")
    return arr


# ---------------------------------------------------------------------------
# construction

def _checked_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape extents must be >= 1, got {shape}")
    return shape


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ConfigError("random initialisation requires an explicit seed")
    return np.random.default_rng(seed)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_checked_shape(shape)), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_checked_shape(shape), float(value)), requires_grad)


def uniform(shape, low: float = 0.0, high: float = 1.0, *, seed, requires_grad: bool = False) -> Tensor:
    rng = _as_rng(seed)
    return Tensor(rng.uniform(low, high, size=_checked_shape(shape)), requires_grad)


def normal(shape, mean: float = 0.0, std: float = 1.0, *, seed, requires_grad: bool = False) -> Tensor:
    rng = _as_rng(seed)
    return Tensor(rng.normal(mean, std, size=_checked_shape(shape)), requires_grad)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple[int, ...]:
    """Result shape for the restricted broadcast; raises on anything fancier.

    An operand may omit leading axes or carry singleton axes, but the set of
    broadcast axes must form a contiguous prefix or a contiguous suffix of
    the padded axis list.  That admits bias terms, per-position gates and
    scalars while rejecting mixed interior patterns.
    """
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    out = []
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {sa} with {sb}")
        out.append(max(da, db))
    out_t = tuple(out)
    # contiguity is judged among axes the output actually extends over; axes
    # of extent 1 on both sides are neutral and never break a block
    significant = [i for i in range(n) if out_t[i] != 1]
    for padded in (pa, pb):
        axes = [i for i in significant if padded[i] == 1]
        if not axes:
            continue
        k = len(axes)
        prefix = axes == significant[:k]
        suffix = axes == significant[-k:]
        if not (prefix or suffix):
            raise ShapeError(
                f"{op}: broadcast of {sa} with {sb} is neither leading-axis nor trailing-singleton"
            )
    return out_t


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# binary elementwise primitives

def _binary(op: str, a, b, fwd, pull_factory) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta.shape, tb.shape, op)
    data = _ensure_finite(fwd(ta.data, tb.data), op)
    out = _wrap(data)
    return _record(out, (ta, tb), pull_factory(ta, tb, out))


def add(a, b) -> Tensor:
    def factory(ta, tb, out):
        def pull(g):
            return _sum_to(g, ta.shape), _sum_to(g, tb.shape)
        return pull
    return _binary("add", a, b, np.add, factory)


def sub(a, b) -> Tensor:
    def factory(ta, tb, out):
        def pull(g):
            return _sum_to(g, ta.shape), _sum_to(-g, tb.shape)
        return pull
    return _binary("sub", a, b, np.subtract, factory)


def mul(a, b) -> Tensor:
    def factory(ta, tb, out):
        def pull(g):
            return _sum_to(g * tb.data, ta.shape), _sum_to(g * ta.data, tb.shape)
        return pull
    return _binary("mul", a, b, np.multiply, factory)


def div(a, b) -> Tensor:
    def fwd(x, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(x, y)

    def factory(ta, tb, out):
        def pull(g):
            ga = _sum_to(g / tb.data, ta.shape)
            gb = _sum_to(-g * ta.data / (tb.data * tb.data), tb.shape)
            return ga, gb
        return pull
    return _binary("div", a, b, fwd, factory)


def matmul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError("matmul operands must have >= 2 dims")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ta.shape} @ {tb.shape}")
    if ta.ndim > 2 and tb.ndim > 2 and ta.shape[:-2] != tb.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {ta.shape} @ {tb.shape}")
    data = _ensure_finite(ta.data @ tb.data, "matmul")
    out = _wrap(data)

    def pull(g):
        ga = _sum_to(g @ np.swapaxes(tb.data, -1, -2), ta.shape)
        gb = _sum_to(np.swapaxes(ta.data, -1, -2) @ g, tb.shape)
        return ga, gb

    return _record(out, (ta, tb), pull)


# ---------------------------------------------------------------------------
# unary elementwise primitives

def exp(x) -> Tensor:
    tx = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(tx.data)
    _ensure_finite(data, "exp")
    out = _wrap(data)

    def pull(g):
        return (g * data,)

    return _record(out, (tx,), pull)


def log(x) -> Tensor:
    tx = as_tensor(x)
    if np.any(tx.data <= 0.0):
        raise DomainError("log requires strictly positive operands")
    data = np.log(tx.data)
    out = _wrap(data)

    def pull(g):
        return (g / tx.data,)

    return _record(out, (tx,), pull)


def sigmoid(x) -> Tensor:
    tx = as_tensor(x)
    v = tx.data
    data = np.empty_like(v)
    pos = v >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    data[~pos] = ev / (1.0 + ev)
    out = _wrap(data)

    def pull(g):
        return (g * data * (1.0 - data),)

    return _record(out, (tx,), pull)


def relu(x) -> Tensor:
    tx = as_tensor(x)
    data = np.maximum(tx.data, 0.0)
    out = _wrap(data)

    def pull(g):
        return (g * (tx.data > 0.0),)

    return _record(out, (tx,), pull)


# ---------------------------------------------------------------------------
# reductions

def _normalized_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def _expand_reduced(g, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    g = np.asarray(g)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    if axis is not None:
        axis = _normalized_axis(axis, tx.ndim)
    data = tx.data.sum(axis=axis, keepdims=keepdims)
    out = _wrap(np.asarray(data))

    def pull(g):
        return (_expand_reduced(g, tx.shape, axis, keepdims).copy(),)

    return _record(out, (tx,), pull)


def _reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    if axis is not None:
        axis = _normalized_axis(axis, tx.ndim)
    data = tx.data.mean(axis=axis, keepdims=keepdims)
    count = tx.size if axis is None else tx.shape[axis]
    out = _wrap(np.asarray(data))

    def pull(g):
        return (_expand_reduced(g, tx.shape, axis, keepdims) / count,)

    return _record(out, (tx,), pull)


def _reduce_max(x, axis=None) -> Tensor:
    """Max reduction; gradient routes to the first attaining element."""
    tx = as_tensor(x)
    if axis is None:
        flat_i = int(np.argmax(tx.data))
        data = tx.data.reshape(-1)[flat_i]
        out = _wrap(np.asarray(data))

        def pull(g):
            z = np.zeros_like(tx.data)
            z.reshape(-1)[flat_i] = np.asarray(g).reshape(())
            return (z,)

        return _record(out, (tx,), pull)

    ax = _normalized_axis(axis, tx.ndim)
    idx = np.expand_dims(np.argmax(tx.data, axis=ax), ax)
    data = np.take_along_axis(tx.data, idx, axis=ax).squeeze(ax)
    out = _wrap(data)

    def pull(g):
        z = np.zeros_like(tx.data)
        np.put_along_axis(z, idx, np.expand_dims(g, ax), axis=ax)
        return (z,)

    return _record(out, (tx,), pull)


def l2norm(x, axis=None) -> Tensor:
    """Euclidean norm over the whole tensor or one axis.

    The gradient at an exactly-zero slice is taken to be zero.
    """
    tx = as_tensor(x)
    if axis is not None:
        axis = _normalized_axis(axis, tx.ndim)
    sq = (tx.data * tx.data).sum(axis=axis)
    data = np.sqrt(sq)
    out = _wrap(np.asarray(data))

    def pull(g):
        norm_e = _expand_reduced(np.asarray(data), tx.shape, axis, False)
        g_e = _expand_reduced(np.asarray(g), tx.shape, axis, False)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(norm_e > 0.0, tx.data / np.where(norm_e == 0.0, 1.0, norm_e), 0.0)
        return (g_e * frac,)

    return _record(out, (tx,), pull)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-subtracted)."""
    tx = as_tensor(x)
    ax = _normalized_axis(axis, tx.ndim)
    shifted = tx.data - tx.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True)
    out = _wrap(data)

    def pull(g):
        inner = (g * data).sum(axis=ax, keepdims=True)
        return (data * (g - inner),)

    return _record(out, (tx,), pull)


# ---------------------------------------------------------------------------
# structural primitives

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ax = _normalized_axis(axis, ts[0].ndim)
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeError("concat operands differ in rank")
        if other[:ax] + other[ax + 1:] != base[:ax] + base[ax + 1:]:
            raise ShapeError("concat operands differ off the concat axis")
    data = np.concatenate([t.data for t in ts], axis=ax)
    out = _wrap(data)
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(piece for piece in np.split(g, offsets, axis=ax))

    return _record(out, tuple(ts), pull)


def reshape(x, shape) -> Tensor:
    tx = as_tensor(x)
    try:
        data = tx.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {tx.shape} to {shape}: {err}") from None
    out = _wrap(data)

    def pull(g):
        return (g.reshape(tx.shape),)

    return _record(out, (tx,), pull)


def transpose(x, axes=None) -> Tensor:
    tx = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(tx.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(tx.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {tx.ndim}")
    data = tx.data.transpose(axes)
    out = _wrap(data)
    inverse = tuple(np.argsort(axes))

    def pull(g):
        return (g.transpose(inverse),)

    return _record(out, (tx,), pull)


def slice_along(x, axis: int, start: int, stop: int) -> Tensor:
    tx = as_tensor(x)
    ax = _normalized_axis(axis, tx.ndim)
    dim = tx.shape[ax]
    if not (0 <= start < stop <= dim):
        raise ShapeError(f"slice [{start}:{stop}] invalid for axis of size {dim}")
    sl = tuple(slice(None) if i != ax else slice(start, stop) for i in range(tx.ndim))
    data = tx.data[sl].copy()
    out = _wrap(data)

    def pull(g):
        z = np.zeros_like(tx.data)
        z[sl] = g
        return (z,)

    return _record(out, (tx,), pull)


def take_rows(matrix, indices) -> Tensor:
    """Row lookup ``matrix[indices]``; the gradient scatter-adds into rows."""
    tm = as_tensor(matrix)
    if tm.ndim != 2:
        raise ShapeError("take_rows expects a 2-D matrix")
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= tm.shape[0]):
        raise ShapeError("take_rows index out of range")
    data = tm.data[idx]
    out = _wrap(data)

    def pull(g):
        z = np.zeros_like(tm.data)
        np.add.at(z, idx.reshape(-1), g.reshape(-1, tm.shape[1]))
        return (z,)

    return _record(out, (tm,), pull)


def detach(x) -> Tensor:
    """Copy of ``x`` cut out of the graph; values are bit-identical."""
    tx = as_tensor(x)
    return _wrap(tx.data.copy())


def straight_through(flow, values) -> Tensor:
    """Forward the ``values`` buffer bit-exactly; route gradient to ``flow``.

    This is the estimator used to train through hard selections: the output
    carries ``values`` but behaves like the identity of ``flow`` under
    differentiation.  ``values`` itself receives no gradient.
    """
    tf, tv = as_tensor(flow), as_tensor(values)
    if tf.shape != tv.shape:
        raise ShapeError(f"straight_through shapes differ: {tf.shape} vs {tv.shape}")
    out = _wrap(tv.data.copy())

    def pull(g):
        return (g, None)

    return _record(out, (tf, tv), pull)


def clip_passthrough(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values into [lo, hi]; the gradient passes through unchanged."""
    tx = as_tensor(x)
    data = np.clip(tx.data, lo, hi)
    out = _wrap(data)

    def pull(g):
        return (g,)

    return _record(out, (tx,), pull)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` over the active tape.

    The walk visits each record exactly once in reverse execution order;
    records not upstream of ``loss`` carry a zero adjoint and contribute
    nothing.  All grads touched by the tape are cleared first, so repeated
    calls on an intact graph give identical results.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    records = _state().graph.records
    for out, inputs, _ in records:
        out.grad = None
        for t in inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, inputs, pull in reversed(records):
        g = out.grad
        if g is None:
            continue
        for t, contrib in zip(inputs, pull(g)):
            if contrib is None or not t.requires_grad:
                continue
            t.grad = contrib if t.grad is None else t.grad + contrib
    for out, inputs, _ in records:
        for t in inputs:
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericsError("backward produced a non-finite gradient")
