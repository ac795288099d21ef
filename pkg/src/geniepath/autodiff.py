"""Define-by-run reverse-mode differentiation over dense float64 matrices.

Every primitive takes and returns 2-D :class:`Tensor` objects. When at least
one input belongs to a :class:`Tape`, the primitive appends a node holding a
closure that maps the output gradient to input gradients. Sparse edge
operations (``gather_rows``, ``segment_sum``, ``segment_softmax``) keep all
intermediate storage proportional to the number of edges.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: Tape | None = None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data)


@dataclass(eq=False)
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


# names of primitives whose backward is deliberately perturbed (negative-control hook)
_CORRUPTED: dict[str, float] = {}


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5):
    """Scale the input gradients of primitive ``op`` while active.

    Exists only so gradient checking can be exercised against a known-bad
    backward pass.
    """
    _CORRUPTED[op] = factor
    try:
        yield
    finally:
        _CORRUPTED.pop(op, None)


class Tape:
    """Ordered record of primitive applications; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}
        self.consumed = False

    def leaf(self, data, name: str) -> Tensor:
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64, copy=True), self, name)
        self.leaves[name] = t
        return t

    def _record(self, op, out, inputs, grad_fn):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(_Node(op, out, inputs, grad_fn))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` for every registered leaf, keyed by name."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be 1x1, got {loss.shape}")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            g_in = node.grad_fn(g_out)
            factor = _CORRUPTED.get(node.op)
            for inp, g in zip(node.inputs, g_in):
                if g is None or inp.tape is not self:
                    continue
                if factor is not None:
                    g = g * factor
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        out = {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in self.leaves.items()}
        self.consumed = True
        self.nodes.clear()
        return out


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def _tape_of(*inputs: Tensor) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _tape_of(*inputs)
    out = Tensor(data, tape)
    if tape is not None:
        tape._record(op, out, inputs, grad_fn)
    return out


def _check_same(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- dense ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``r`` of ``a`` by the scalar ``w[r, 0]``."""
    if w.shape != (a.rows, 1):
        raise ValueError(f"scale_rows: weights {w.shape} do not match rows of {a.shape}")
    A, W = a.data, w.data
    return _emit("scale_rows", A * W, (a, w),
                 lambda g: (g * W, np.sum(g * A, axis=1, keepdims=True)))


def add_row(a: Tensor, b: Tensor) -> Tensor:
    """Add the 1 x K row ``b`` to every row of ``a``."""
    if b.shape != (1, a.cols):
        raise ValueError(f"add_row: bias {b.shape} does not match {a.shape}")
    return _emit("add_row", a.data + b.data, (a, b),
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def identity(a: Tensor) -> Tensor:
    return a


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ValueError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    k = a.cols
    return _emit("concat_cols", np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum_all", np.array([[a.data.sum()]]), (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def sum_squares(a: Tensor) -> Tensor:
    A = a.data
    return _emit("sum_squares", np.array([[np.sum(A * A)]]), (a,),
                 lambda g: (2.0 * g[0, 0] * A,))


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over the rows selected by ``mask``."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("softmax_cross_entropy: empty mask")
    Z = logits.data[idx]
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    y = np.asarray(labels)[idx].astype(np.int64)
    loss = -log_p[np.arange(idx.size), y].mean()
    shape = logits.shape

    def grad_fn(g):
        p = np.exp(log_p)
        p[np.arange(idx.size), y] -= 1.0
        full = np.zeros(shape)
        full[idx] = p * (g[0, 0] / idx.size)
        return (full,)

    return _emit("softmax_cross_entropy", np.array([[loss]]), (logits,), grad_fn)


def sigmoid_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over masked rows and all label columns."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("sigmoid_cross_entropy: empty mask")
    Z = logits.data[idx]
    Y = np.asarray(targets, dtype=np.float64)[idx]
    if Y.shape != Z.shape:
        raise ValueError(f"sigmoid_cross_entropy: targets {Y.shape} vs logits {Z.shape}")
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    loss = np.mean(np.logaddexp(0.0, -np.abs(Z)) + np.maximum(Z, 0.0) - Z * Y)
    shape = logits.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[idx] = (_sigmoid(Z) - Y) * (g[0, 0] / Z.size)
        return (full,)

    return _emit("sigmoid_cross_entropy", np.array([[loss]]), (logits,), grad_fn)


# ---------------------------------------------------------------- sparse edge ops

@dataclass(frozen=True, eq=False)
class SegmentIndex:
    """Maps each edge to the segment (destination node) it reduces into."""

    segment_of_edge: np.ndarray
    num_segments: int

    def __post_init__(self):
        seg = np.asarray(self.segment_of_edge, dtype=np.int64)
        if seg.ndim != 1:
            raise ValueError("segment_of_edge must be 1-D")
        if seg.size and (seg.min() < 0 or seg.max() >= self.num_segments):
            raise ValueError("segment id out of range")
        object.__setattr__(self, "segment_of_edge", seg)

    @property
    def num_edges(self) -> int:
        return int(self.segment_of_edge.size)

    @cached_property
    def reducer(self) -> sp.csr_matrix:
        """``num_segments x num_edges`` 0/1 matrix; rows sum edges in edge order."""
        return _scatter_matrix(self.segment_of_edge, self.num_segments)


def _scatter_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    e = index.size
    # csr built from sorted (row, col) pairs keeps per-row summation in edge order
    order = np.argsort(index, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(index, minlength=n), out=indptr[1:])
    return sp.csr_matrix((np.ones(e), order.astype(np.int64), indptr), shape=(n, e))


def gather_rows(h: Tensor, index) -> Tensor:
    """Row ``e`` of the output is row ``index[e]`` of ``h``."""
    index = np.asarray(index, dtype=np.int64)
    n = h.rows
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range [0, {n})")

    def grad_fn(g):
        return (_scatter_matrix(index, n) @ g,)

    return _emit("gather_rows", h.data[index], (h,), grad_fn)


def segment_sum(values: Tensor, seg: SegmentIndex) -> Tensor:
    if values.rows != seg.num_edges:
        raise ValueError(f"segment_sum: {values.rows} rows for {seg.num_edges} edges")
    R = seg.reducer
    ids = seg.segment_of_edge
    return _emit("segment_sum", np.asarray(R @ values.data), (values,),
                 lambda g: (g[ids],))


def segment_softmax(scores: Tensor, seg: SegmentIndex) -> Tensor:
    """Softmax of a column of edge scores within each segment."""
    if scores.rows == 0:
        raise ValueError("segment_softmax: empty tensor")
    if scores.shape != (seg.num_edges, 1):
        raise ValueError(f"segment_softmax: scores {scores.shape} for {seg.num_edges} edges")
    s = scores.data[:, 0]
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("segment_softmax: non-finite scores")
    ids = seg.segment_of_edge
    seg_max = np.full(seg.num_segments, -np.inf)
    np.maximum.at(seg_max, ids, s)
    e = np.exp(s - seg_max[ids])
    denom = seg.reducer @ e
    y = (e / denom[ids]).reshape(-1, 1)

    def grad_fn(g):
        dot = seg.reducer @ (g[:, 0] * y[:, 0])
        return (y * (g - dot[ids].reshape(-1, 1)),)

    return _emit("segment_softmax", y, (scores,), grad_fn)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, int] | None
    per_param: dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(f: Callable[[Tape, dict[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], eps: float = 1e-6) -> GradCheckResult:
    """Compare tape gradients with central differences.

    ``f(tape, leaves)`` must build a scalar loss from the leaf tensors. The
    error for each entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values: Mapping[str, np.ndarray]) -> float:
        tape = Tape()
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        return f(tape, leaves).item()

    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    loss = f(tape, leaves)
    base = loss.item()
    analytic = tape.backward(loss)
    if evaluate(params) != base:
        raise RuntimeError("grad_check: function is not deterministic")

    worst, worst_name, worst_idx = 0.0, None, None
    per_param = {}
    for name, value in params.items():
        err_p = 0.0
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            f_plus = evaluate(params)
            value[idx] = orig - eps
            f_minus = evaluate(params)
            value[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(1.0, abs(a))
            err_p = max(err_p, err)
            if err > worst or worst_name is None:
                worst, worst_name, worst_idx = err, name, tuple(int(i) for i in idx)
        per_param[name] = err_p
    return GradCheckResult(worst, worst_name, worst_idx, per_param)
