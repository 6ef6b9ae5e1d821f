"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs is tracked, i.e. is a
parameter or was produced by a recorded operation. Outside a tape the same
functions run as plain numpy code, which is what inference uses.

    with Tape() as tape:
        loss = nll(...)
    grads = backward(tape, loss)   # {param: ndarray}

Segment operations take integer ``segment_ids`` assigning each row of the
input to an output segment, plus an optional ``mask``. Masked rows are
dropped before any arithmetic, so padding never changes a result bit.
"""

from __future__ import annotations

import logging
import threading
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from .errors import NonScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
SOFTPLUS_LINEAR_ABOVE = 30.0

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "tracked", "name", "__weakref__")

    def __init__(self, data, tracked: bool = False, name: str | None = None):
        self.data = _float_array(data)
        self.tracked = tracked
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __getitem__(self, key):
        return getitem(self, key)


def _float_array(data, copy: bool = False) -> np.ndarray:
    # float64 throughout; extended precision is kept when given (gradient checks)
    arr = np.array(data, copy=copy) if copy else np.asarray(data)
    if arr.dtype != np.float64 and arr.dtype != np.longdouble:
        arr = arr.astype(np.float64)
    return arr


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(_float_array(data, copy=True), tracked=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(op, output, inputs, vjp)`` where ``vjp`` maps the output
    cotangent to one cotangent per input (``None`` for untracked inputs).
    Entries are appended in execution order, hence topologically sorted.
    """

    def __init__(self):
        self.entries: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)


def _record(op: str, out_data, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out = Tensor(out_data, tracked=True)
        tape.entries.append((op, out, inputs, vjp))
        return out
    return Tensor(out_data)


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns a dict keyed by tensor identity. Parameters that do not influence
    the loss get zero gradients when listed in ``wrt``.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for op, out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.tracked:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    result = {}
    if wrt is None:
        for key, t in leaves.items():
            if key in grads:
                result[t] = grads[key]
    else:
        for t in wrt:
            g = grads.get(id(t))
            result[t] = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


# ---------------------------------------------------------------------------
# shape and linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, key) -> Tensor:
    """Basic (slice) indexing."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record("getitem", a.data[key], (a,), vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _scatter_matrix(ids: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = ids.shape[0]
    return sp.csr_matrix((np.ones(n), (ids, np.arange(n))), shape=(num_segments, n))


def _scatter_add(values: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    if values.ndim == 1 and values.dtype == np.float64:
        return np.bincount(ids, weights=values, minlength=num_segments).astype(np.float64)
    flat = values.reshape(values.shape[0], int(np.prod(values.shape[1:], dtype=np.int64)))
    out = _scatter_matrix(ids, num_segments) @ flat
    return np.asarray(out).reshape((num_segments,) + values.shape[1:])


def take(a, index, num_rows: int | None = None) -> Tensor:
    """Gather rows ``a[index]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    return _record("take", a.data[index], (a,),
                   lambda g: (_scatter_add(g, index, a.shape[0]),))


def scatter_rows(a, index, num_rows: int) -> Tensor:
    """Place row ``k`` of ``a`` at row ``index[k]`` of a zero array (indices unique)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((num_rows,) + a.shape[1:], dtype=a.data.dtype)
    out[index] = a.data
    return _record("scatter_rows", out, (a,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# segment reductions


def _apply_mask(x: Tensor, segment_ids, mask):
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"segment ids length {segment_ids.shape[0]} != rows {x.shape[0]}")
    if mask is None:
        return x, segment_ids
    mask = np.asarray(mask)
    if mask.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"mask length {mask.shape[0]} != rows {x.shape[0]}")
    keep = np.flatnonzero(mask > 0)
    if keep.size == x.shape[0]:
        return x, segment_ids
    return take(x, keep), segment_ids[keep]


def segment_reduce(x, segment_ids, num_segments: int, kind: str = "sum", mask=None) -> Tensor:
    """Reduce rows of ``x`` into ``num_segments`` groups.

    Empty segments (no unmasked rows) give zeros for every kind.
    """
    x = as_tensor(x)
    x, ids = _apply_mask(x, segment_ids, mask)
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeMismatch("segment id out of range")
    if kind == "sum":
        return _record("segment_sum", _scatter_add(x.data, ids, num_segments), (x,),
                       lambda g: (g[ids],))
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    if kind in ("mean", "max") and (counts == 0).any():
        logger.debug("segment_%s: %d empty segments set to zero", kind, int((counts == 0).sum()))
    if kind == "mean":
        denom = np.maximum(counts, 1.0).reshape((-1,) + (1,) * (x.ndim - 1))
        out = _scatter_add(x.data, ids, num_segments) / denom
        return _record("segment_mean", out, (x,), lambda g: ((g / denom)[ids],))
    if kind == "max":
        out = np.full((num_segments,) + x.shape[1:], -np.inf, dtype=x.data.dtype)
        np.maximum.at(out, ids, x.data)
        out[counts == 0] = 0.0
        hit = (x.data == out[ids]).astype(np.float64)
        ties = _scatter_add(hit, ids, num_segments)
        share = hit / np.maximum(ties, 1.0)[ids]
        return _record("segment_max", out, (x,), lambda g: (g[ids] * share,))
    raise ValueError(f"unknown segment reduction {kind!r}")


def segment_sum(x, segment_ids, num_segments, mask=None) -> Tensor:
    return segment_reduce(x, segment_ids, num_segments, "sum", mask)


def segment_mean(x, segment_ids, num_segments, mask=None) -> Tensor:
    return segment_reduce(x, segment_ids, num_segments, "mean", mask)


def segment_max(x, segment_ids, num_segments, mask=None) -> Tensor:
    return segment_reduce(x, segment_ids, num_segments, "max", mask)


def segment_softmax(scores, segment_ids, num_segments: int, mask=None) -> Tensor:
    """Softmax over rows sharing a segment id; masked rows get probability 0.

    ``scores`` may be 1-D or 2-D (one column per head).
    """
    scores = as_tensor(scores)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[0] != scores.shape[0]:
            raise ShapeMismatch(f"mask length {mask.shape[0]} != rows {scores.shape[0]}")
        keep = np.flatnonzero(mask > 0)
        if keep.size != scores.shape[0]:
            inner = segment_softmax(take(scores, keep), segment_ids[keep], num_segments)
            return scatter_rows(inner, keep, scores.shape[0])
    ids = segment_ids
    if ids.shape[0] != scores.shape[0]:
        raise ShapeMismatch(f"segment ids length {ids.shape[0]} != rows {scores.shape[0]}")
    peak = np.full((num_segments,) + scores.shape[1:], -np.inf, dtype=scores.data.dtype)
    np.maximum.at(peak, ids, scores.data)
    e = np.exp(scores.data - peak[ids])
    alpha = e / _scatter_add(e, ids, num_segments)[ids]

    def vjp(g):
        ga = g * alpha
        return (ga - alpha * _scatter_add(ga, ids, num_segments)[ids],)

    return _record("segment_softmax", alpha, (scores,), vjp)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    big = x > SOFTPLUS_LINEAR_ABOVE
    return np.where(big, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))


def _act_forward(kind: str, x: np.ndarray):
    """Return (value, derivative) for an activation."""
    if kind == "linear":
        return x, np.ones_like(x)
    if kind == "relu":
        return np.maximum(x, 0.0), (x > 0).astype(np.float64)
    if kind == "relu6":
        return np.clip(x, 0.0, 6.0), ((x > 0) & (x < 6)).astype(np.float64)
    if kind == "leakyrelu":
        return np.where(x > 0, x, LEAKY_SLOPE * x), np.where(x > 0, 1.0, LEAKY_SLOPE)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return s, s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return t, 1.0 - t * t
    if kind == "softplus":
        d = _sigmoid(x)
        d[x > SOFTPLUS_LINEAR_ABOVE] = 1.0
        return _softplus(x), d
    if kind == "elu":
        neg_part = np.expm1(np.minimum(x, 0.0))
        return np.where(x > 0, x, neg_part), np.where(x > 0, 1.0, neg_part + 1.0)
    raise ValueError(f"unknown activation {kind!r}")


ACTIVATIONS = ("sigmoid", "tanh", "relu", "linear", "softplus", "leakyrelu", "relu6", "elu")


def activation(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "linear":
        return x
    out, deriv = _act_forward(kind, x.data)
    return _record(kind, out, (x,), lambda g: (g * deriv,))


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def relu(x) -> Tensor:
    return activation(x, "relu")


def softplus(x) -> Tensor:
    return activation(x, "softplus")


def leaky_relu(x) -> Tensor:
    return activation(x, "leakyrelu")


# ---------------------------------------------------------------------------
# composite layers


def gru_cell(h, x, params: dict) -> Tensor:
    """One GRU step with node state ``h`` and input (message) ``x``.

    ``params`` holds ``wx`` (in x 3d), ``uzr`` (d x 2d), ``uh`` (d x d) and
    ``b`` (3d). Gate order in ``wx``/``b`` is update, reset, candidate.
    """
    d = h.shape[1]
    xw = matmul(x, params["wx"]) + params["b"]
    hu = matmul(h, params["uzr"])
    z = sigmoid(xw[:, :d] + hu[:, :d])
    r = sigmoid(xw[:, d:2 * d] + hu[:, d:])
    cand = tanh(xw[:, 2 * d:] + matmul(r * h, params["uh"]))
    return h + z * (cand - h)


def dropout(x, rate: float, uniforms: np.ndarray | None) -> Tensor:
    """Inverted dropout with a caller-supplied uniform draw per element."""
    if rate <= 0.0 or uniforms is None:
        return as_tensor(x)
    keep = (uniforms.reshape(as_tensor(x).shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[], Tensor], params: list[Tensor], step: float = 1e-5,
                      return_details: bool = False, dtype=np.longdouble):
    """Compare ``backward`` against central differences, element by element.

    ``f`` must rebuild the scalar output from the current parameter values on
    every call. The relative error of an element is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the maximum over all elements is
    returned.

    Parameters are cast to ``dtype`` for the duration of the check (and
    restored afterwards). The default extended precision keeps the rounding
    noise of the difference quotient, roughly eps * |f| / step, well below
    gradients of size 1e-8; pass ``np.float64`` to check at working precision.
    """
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(dtype)
        with Tape() as tape:
            out = f()
        analytic = backward(tape, out, wrt=params)
        worst = 0.0
        where = None
        for p in params:
            flat = p.data.reshape(-1)
            ga = analytic[p].reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = f().data[()]
                flat[k] = orig - step
                fm = f().data[()]
                flat[k] = orig
                num = (fp - fm) / (2 * step)
                err = float(abs(ga[k] - num) / max(abs(ga[k]), abs(num), 1e-8))
                if err > worst:
                    worst, where = err, (p.name, k, float(ga[k]), float(num))
    finally:
        for p, d in zip(params, saved):
            p.data = d
    if return_details:
        return worst, where
    return worst
