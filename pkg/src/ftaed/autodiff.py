"""Tape-based reverse-mode autodiff over 2-D float arrays.

The vocabulary is closed: exactly the primitives the graph autoencoders need.
Forward values are float32 by default (``precision`` switches, e.g. to float64
for gradient checks); reductions accumulate in float64.

    with Tape() as tape:
        y = mse(relu(x @ w), target)
    grads = tape.backward(y)
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidSegment, NonFiniteProbe, NonScalarLoss, ShapeMismatch

_state = threading.local()
DEBUG = False


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class PrimitiveKind(Enum):
    MATMUL = "MatMul"
    ADD = "Add"
    MUL = "ElementwiseMul"
    RELU = "ReLU"
    LEAKY_RELU = "LeakyReLU"
    SIGMOID = "Sigmoid"
    TANH = "Tanh"
    GATHER = "Gather"
    SCATTER_ADD_ROWS = "ScatterAddRows"
    SEGMENT_SOFTMAX = "SegmentSoftmax"
    MEAN_POOL_ROWS = "MeanPoolRows"
    DROPOUT = "Dropout"
    RESHAPE = "Reshape"
    MSE = "MSE"


class Tensor:
    """A 2-D array; 0-D and 1-D inputs become ``[1, n]`` rows."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch("Tensor", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Record:
    kind: PrimitiveKind
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives; ``backward`` replays it in reverse."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
        """Gradients of scalar ``loss`` for every ``requires_grad`` tensor on the tape and in ``wrt``.

        Tensors in ``wrt`` that do not influence the loss get zero gradients.
        """
        if loss.shape != (1, 1):
            raise NonScalarLoss(f"loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            g = g.astype(rec.output.data.dtype, copy=False)
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
                leaves.setdefault(id(inp), inp)
        out = {t: Tensor(grads[key], dtype=t.data.dtype) for key, t in leaves.items() if key in grads}
        produced = {id(rec.output) for rec in self.records}
        candidates = [i for rec in self.records for i in rec.inputs if id(i) not in produced]
        for p in [*candidates, *(wrt or ())]:
            if p.requires_grad or wrt is not None and p in wrt:
                out.setdefault(p, Tensor(np.zeros(p.shape), dtype=p.data.dtype))
        return out


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _record(kind, inputs, out_data, vjp) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{kind.value} produced non-finite values")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        tape.records.append(_Record(kind, tuple(inputs), out, vjp))
    return out


# ---------------------------------------------------------------------------
# Index helpers


class RowIndex:
    """Row-index vector with a cached sparse scatter matrix."""

    def __init__(self, idx, n_rows: int | None = None):
        self.idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        self.n_rows = n_rows
        self._scatter: dict[tuple, sp.csr_matrix] = {}

    def __len__(self):
        return len(self.idx)

    def scatter_matrix(self, n_rows: int, dtype=np.float64) -> sp.csr_matrix:
        key = (n_rows, np.dtype(dtype).str)
        m = self._scatter.get(key)
        if m is None:
            if len(self.idx) and (self.idx.min() < 0 or self.idx.max() >= n_rows):
                raise InvalidSegment(f"row index out of range for {n_rows} rows")
            m = sp.csr_matrix(
                (np.ones(len(self.idx), dtype=dtype), (self.idx, np.arange(len(self.idx)))),
                shape=(n_rows, len(self.idx)),
            )
            self._scatter[key] = m
        return m

    def scatter(self, values: np.ndarray, n_rows: int) -> np.ndarray:
        return np.asarray(self.scatter_matrix(n_rows, values.dtype) @ values)


def _index(idx) -> RowIndex:
    return idx if isinstance(idx, RowIndex) else RowIndex(idx)


class Segments:
    """Sorted segment ids (one per row) with cached boundaries."""

    def __init__(self, ids, n_segments: int | None = None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if len(ids) and (np.any(np.diff(ids) < 0) or ids[0] < 0):
            raise InvalidSegment("segment ids must be sorted and non-negative")
        self.ids = ids
        self.n_segments = int(ids[-1]) + 1 if n_segments is None and len(ids) else (n_segments or 0)
        if len(ids) and ids[-1] >= self.n_segments:
            raise InvalidSegment("segment id exceeds segment count")
        self.starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]]) if len(ids) else ids
        self.present = ids[self.starts]
        self.counts = np.bincount(ids, minlength=self.n_segments)

    def __len__(self):
        return len(self.ids)

    def reduce_sum(self, x: np.ndarray) -> np.ndarray:
        """Per present segment sum in float64, shape ``[n_present, cols]``."""
        return np.add.reduceat(x.astype(np.float64), self.starts, axis=0)

    def expand(self, per_segment: np.ndarray) -> np.ndarray:
        """Broadcast per-present-segment rows back to element rows."""
        return np.repeat(per_segment, np.diff(np.r_[self.starts, len(self.ids)]), axis=0)


def _segments(seg) -> Segments:
    return seg if isinstance(seg, Segments) else Segments(seg)


# ---------------------------------------------------------------------------
# Primitives


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True, dtype=np.float64)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True, dtype=np.float64)
    return g


def _check_broadcast(kind, a: Tensor, b: Tensor, cols_ok: bool):
    ra, ca = a.shape
    rb, cb = b.shape
    if (ra, ca) == (rb, cb) or (rb == 1 and cb == ca):
        return
    if cols_ok and cb == 1 and rb in (1, ra):
        return
    raise ShapeMismatch(kind.value, a.shape, b.shape)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(PrimitiveKind.MATMUL.value, a.shape, b.shape)
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(PrimitiveKind.MATMUL, (a, b), A @ B, vjp)


def add(a, b) -> Tensor:
    """``a + b`` where ``b`` matches ``a`` or is a ``[1, cols]`` row broadcast over rows."""
    a, b = _t(a), _t(b)
    _check_broadcast(PrimitiveKind.ADD, a, b, cols_ok=False)
    return _record(
        PrimitiveKind.ADD, (a, b), a.data + b.data,
        lambda g: (g, _unbroadcast(g, b.shape) if b.requires_grad else None),
    )


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may also be a ``[1, cols]`` row, ``[rows, 1]`` column or ``1x1``."""
    a, b = _t(a), _t(b)
    _check_broadcast(PrimitiveKind.MUL, a, b, cols_ok=True)
    A, B = a.data, b.data

    def vjp(g):
        return (g * B if a.requires_grad else None, _unbroadcast(g * A, b.shape) if b.requires_grad else None)

    return _record(PrimitiveKind.MUL, (a, b), A * B, vjp)


def relu(x) -> Tensor:
    x = _t(x)
    pos = x.data > 0
    return _record(PrimitiveKind.RELU, (x,), x.data * pos, lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _t(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _record(PrimitiveKind.LEAKY_RELU, (x,), x.data * scale, lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return _record(PrimitiveKind.SIGMOID, (x,), y, lambda g: (g * y * (1 - y),))


def tanh(x) -> Tensor:
    x = _t(x)
    y = np.tanh(x.data)
    return _record(PrimitiveKind.TANH, (x,), y, lambda g: (g * (1 - y * y),))


def gather(x, index) -> Tensor:
    """Row selection ``x[index]``; the adjoint of :func:`scatter_add`."""
    x, index = _t(x), _index(index)
    n = x.shape[0]
    if len(index.idx) and (index.idx.min() < 0 or index.idx.max() >= n):
        raise InvalidSegment(f"gather index out of range for {n} rows")
    return _record(
        PrimitiveKind.GATHER, (x,), x.data[index.idx], lambda g: (index.scatter(g, n),)
    )


def scatter_add(x, index, n_rows: int) -> Tensor:
    """``out[index[e]] += x[e]`` over rows, into an ``[n_rows, cols]`` output."""
    x, index = _t(x), _index(index)
    if len(index) != x.shape[0]:
        raise ShapeMismatch(PrimitiveKind.SCATTER_ADD_ROWS.value, x.shape, (len(index),))
    out = index.scatter(x.data, n_rows).astype(x.data.dtype)
    return _record(PrimitiveKind.SCATTER_ADD_ROWS, (x,), out, lambda g: (g[index.idx],))


def segment_softmax(x, segments) -> Tensor:
    """Softmax over each run of equal (sorted) segment ids, column by column."""
    x, seg = _t(x), _segments(segments)
    if len(seg) != x.shape[0]:
        raise ShapeMismatch(PrimitiveKind.SEGMENT_SOFTMAX.value, x.shape, (len(seg),))
    shift = seg.expand(np.maximum.reduceat(x.data, seg.starts, axis=0))
    e = np.exp(x.data.astype(np.float64) - shift)
    y64 = e / seg.expand(seg.reduce_sum(e))
    y = y64.astype(x.data.dtype)

    def vjp(g):
        inner = seg.expand(seg.reduce_sum(g * y64))
        return (y64 * (g - inner),)

    return _record(PrimitiveKind.SEGMENT_SOFTMAX, (x,), y, vjp)


def mean_pool(x, segments) -> Tensor:
    """Mean of the rows in each segment; output ``[n_segments, cols]``."""
    x, seg = _t(x), _segments(segments)
    if len(seg) != x.shape[0]:
        raise ShapeMismatch(PrimitiveKind.MEAN_POOL_ROWS.value, x.shape, (len(seg),))
    if np.any(seg.counts == 0):
        raise InvalidSegment("mean pooling over an empty segment")
    counts = seg.counts[:, None].astype(np.float64)
    out = (seg.reduce_sum(x.data) / counts).astype(x.data.dtype)
    return _record(
        PrimitiveKind.MEAN_POOL_ROWS, (x,), out, lambda g: (seg.expand(g / counts),)
    )


def dropout(x, p: float, seed=None, training: bool = True) -> Tensor:
    """Inverted dropout. ``seed`` may be an int or a ``numpy.random.Generator``."""
    x = _t(x)
    if not training or p <= 0:
        return x
    if not 0 <= p < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)
    return _record(PrimitiveKind.DROPOUT, (x,), x.data * keep, lambda g: (g * keep,))


def reshape(x, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    x = _t(x)
    if rows * cols != x.data.size:
        raise ShapeMismatch(PrimitiveKind.RESHAPE.value, x.shape, (rows, cols))
    shape = x.shape
    return _record(
        PrimitiveKind.RESHAPE, (x,), x.data.reshape(rows, cols), lambda g: (g.reshape(shape),)
    )


def mse(pred, target, reduction: str = "mean") -> Tensor:
    """Squared error reduced to a ``1x1`` tensor.

    ``mean`` averages over every element; ``row_sum`` sums each row and averages
    over rows (per-node squared error summed over features, averaged over nodes).
    """
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(PrimitiveKind.MSE.value, pred.shape, target.shape)
    diff = pred.data.astype(np.float64) - target.data
    if reduction == "mean":
        denom = diff.size
    elif reduction == "row_sum":
        denom = diff.shape[0]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.array([[np.sum(diff * diff) / denom]], dtype=pred.data.dtype)

    def vjp(g):
        d = (2.0 / denom) * diff * g[0, 0]
        return d, (-d if target.requires_grad else None)

    return _record(PrimitiveKind.MSE, (pred, target), value, vjp)


_DISPATCH = {
    PrimitiveKind.MATMUL: matmul,
    PrimitiveKind.ADD: add,
    PrimitiveKind.MUL: mul,
    PrimitiveKind.RELU: relu,
    PrimitiveKind.LEAKY_RELU: leaky_relu,
    PrimitiveKind.SIGMOID: sigmoid,
    PrimitiveKind.TANH: tanh,
    PrimitiveKind.GATHER: gather,
    PrimitiveKind.SCATTER_ADD_ROWS: scatter_add,
    PrimitiveKind.SEGMENT_SOFTMAX: segment_softmax,
    PrimitiveKind.MEAN_POOL_ROWS: mean_pool,
    PrimitiveKind.DROPOUT: dropout,
    PrimitiveKind.RESHAPE: reshape,
    PrimitiveKind.MSE: mse,
}


def apply_primitive(kind: PrimitiveKind | str, inputs: Sequence, **attrs) -> Tensor:
    """Run one primitive by kind, e.g. ``apply_primitive("Gather", [x], index=idx)``."""
    kind = kind if isinstance(kind, PrimitiveKind) else PrimitiveKind(kind)
    return _DISPATCH[kind](*inputs, **attrs)


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    return tape.backward(loss, wrt)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    f: Callable[..., Tensor],
    point,
    eps: float = 1e-3,
    probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max over probed coordinates of ``|analytic - central FD| / max(1, |analytic|)``.

    ``point`` is one array/Tensor or a list of them (``f`` then takes that many
    arguments). Runs in float64. ``probes`` limits the check to that many
    randomly chosen coordinates per input.
    """
    single = not isinstance(point, (list, tuple))
    points = [point] if single else list(point)
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64, ndmin=2) for p in points]

    with precision(np.float64):
        xs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = f(*xs)
        if not np.isfinite(loss.data).all():
            raise NonFiniteProbe("f is not finite at the probe point")
        grads = tape.backward(loss, wrt=xs)

        def evaluate(vals):
            out = f(*[Tensor(v) for v in vals]).item()
            if not np.isfinite(out):
                raise NonFiniteProbe("f is not finite inside the eps-ball")
            return out

        rng = np.random.default_rng(seed)
        worst = 0.0
        for i, a in enumerate(arrays):
            analytic = grads[xs[i]].data
            coords = np.arange(a.size)
            if probes is not None and probes < a.size:
                coords = rng.choice(a.size, probes, replace=False)
            for c in coords:
                idx = np.unravel_index(c, a.shape)
                plus = [v.copy() for v in arrays]
                minus = [v.copy() for v in arrays]
                plus[i][idx] += eps
                minus[i][idx] -= eps
                fd = (evaluate(plus) - evaluate(minus)) / (2 * eps)
                an = analytic[idx]
                worst = max(worst, abs(an - fd) / max(1.0, abs(an)))
    return worst
