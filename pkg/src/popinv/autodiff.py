"""Tape-based reverse-mode differentiation over dense float64 arrays.

A ``Tape`` records primitive operations on ``Variable`` objects as they are
evaluated; ``Tape.backward`` replays the records in reverse to accumulate
adjoints. ``detach`` freezes a value: consumers still see it, but no adjoint
ever propagates past it. Sorting records its forward permutation so the
backward pass routes gradients through the frozen ordering.

All values are float64. One tape is single-writer; disjoint tapes may be
built and consumed concurrently (the active-tape stack is thread local).
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from .errors import ContractViolation

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Test hook: when True the sort adjoint ignores the recorded permutation,
# which makes gradient checks fail. Used as a negative control by `verify`.
_SORT_ADJOINT_FAULT = False

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Variable:
    """A dense float64 value with an adjoint slot.

    ``requires_grad`` marks values that participate in differentiation;
    ``detached`` marks values whose history is cut. ``grad`` is populated
    (for gradient-bearing leaves) by ``Tape.backward``.
    """

    __slots__ = ("value", "grad", "requires_grad", "detached", "_leaf", "name")

    def __init__(self, value, requires_grad=False, detached=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.detached = bool(detached)
        self._leaf = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def contributes(self):
        return self.requires_grad and not self.detached

    def __repr__(self):
        tag = ", detached" if self.detached else ""
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; all routed through the module-level primitives
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

    def __pow__(self, p):
        return power(self, p)


class Tape:
    """Ordered record of primitive operations, consumed by one backward pass."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _append(self, out, backward_fn):
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Variable):
        """Accumulate d(loss)/d(leaf) into every gradient-bearing leaf.

        Returns a dict mapping each reached leaf Variable to its gradient
        array. Raises ContractViolation when loss is not scalar.
        """
        if loss.value.shape != ():
            raise ContractViolation(
                f"backward expects a scalar loss, got shape {loss.value.shape}"
            )
        adjoints = {id(loss): np.ones((), dtype=np.float64)}
        holders = {id(loss): loss}
        leaf_grads = {}
        for out, backward_fn in reversed(self._nodes):
            g = adjoints.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for var, contrib in backward_fn(g):
                if not var.contributes():
                    continue
                key = id(var)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + contrib
                else:
                    adjoints[key] = contrib
                    holders[key] = var
        for key, g in adjoints.items():
            var = holders[key]
            if var._leaf:
                g = np.asarray(g, dtype=np.float64).reshape(var.value.shape)
                var.grad = g
                leaf_grads[var] = g
        return leaf_grads


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _record(value, inputs, backward_fn):
    out = Variable(value)
    tape = active_tape()
    if tape is not None and any(v.contributes() for v in inputs):
        out.requires_grad = True
        tape._append(out, backward_fn)
    return out


def _unbroadcast(g, shape):
    # reduce an adjoint back to the operand's pre-broadcast shape
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def detach(v) -> Variable:
    """Cut the history: same value, zero adjoint to producers."""
    v = as_variable(v)
    out = Variable(v.value, detached=True)
    return out


def add(a, b):
    a, b = as_variable(a), as_variable(b)
    val = a.value + b.value

    def bw(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(g, b.value.shape)))

    return _record(val, (a, b), bw)


def sub(a, b):
    a, b = as_variable(a), as_variable(b)
    val = a.value - b.value

    def bw(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(-g, b.value.shape)))

    return _record(val, (a, b), bw)


def mul(a, b):
    a, b = as_variable(a), as_variable(b)
    val = a.value * b.value

    def bw(g):
        return (
            (a, _unbroadcast(g * b.value, a.value.shape)),
            (b, _unbroadcast(g * a.value, b.value.shape)),
        )

    return _record(val, (a, b), bw)


def div(a, b):
    a, b = as_variable(a), as_variable(b)
    val = a.value / b.value

    def bw(g):
        return (
            (a, _unbroadcast(g / b.value, a.value.shape)),
            (b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
        )

    return _record(val, (a, b), bw)


def matmul(a, b):
    a, b = as_variable(a), as_variable(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise ContractViolation(
            f"matmul supports 1D/2D operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[-1] != b.value.shape[0]:
        raise ContractViolation(
            f"matmul inner dimensions disagree: {a.value.shape} @ {b.value.shape}"
        )
    val = a.value @ b.value

    def bw(g):
        av, bv = a.value, b.value
        if av.ndim == 1 and bv.ndim == 1:
            return ((a, g * bv), (b, g * av))
        if av.ndim == 2 and bv.ndim == 2:
            return ((a, g @ bv.T), (b, av.T @ g))
        if av.ndim == 2 and bv.ndim == 1:
            return ((a, np.outer(g, bv)), (b, av.T @ g))
        # 1D @ 2D
        return ((a, bv @ g), (b, np.outer(av, g)))

    return _record(val, (a, b), bw)


def dot(a, b):
    a, b = as_variable(a), as_variable(b)
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ContractViolation(f"dot expects equal-length 1D vectors, got {a.value.shape} and {b.value.shape}")
    return matmul(a, b)


def exp(a):
    a = as_variable(a)
    val = np.exp(a.value)

    def bw(g):
        return ((a, g * val),)

    return _record(val, (a,), bw)


def log(a):
    a = as_variable(a)
    val = np.log(a.value)

    def bw(g):
        return ((a, g / a.value),)

    return _record(val, (a,), bw)


def sqrt(a):
    a = as_variable(a)
    val = np.sqrt(a.value)

    def bw(g):
        return ((a, g * (0.5 / val)),)

    return _record(val, (a,), bw)


def power(a, p):
    a = as_variable(a)
    p = float(p)
    val = a.value**p

    def bw(g):
        return ((a, g * p * a.value ** (p - 1.0)),)

    return _record(val, (a,), bw)


def cos(a):
    a = as_variable(a)
    val = np.cos(a.value)

    def bw(g):
        return ((a, -g * np.sin(a.value)),)

    return _record(val, (a,), bw)


def gelu(a):
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    a = as_variable(a)
    x = a.value
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    val = x * phi_cdf

    def bw(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((a, g * (phi_cdf + x * dens)),)

    return _record(val, (a,), bw)


def vabs(a):
    a = as_variable(a)
    val = np.abs(a.value)

    def bw(g):
        return ((a, g * np.sign(a.value)),)

    return _record(val, (a,), bw)


def vsum(a, axis=None):
    a = as_variable(a)
    val = a.value.sum(axis=axis)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.value.shape).copy()),)
        ge = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(ge, a.value.shape).copy()),)

    return _record(val, (a,), bw)


def vmean(a, axis=None):
    a = as_variable(a)
    val = a.value.mean(axis=axis)
    n = a.value.size if axis is None else a.value.shape[axis]

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.value.shape).copy()),)
        ge = np.expand_dims(g / n, axis)
        return ((a, np.broadcast_to(ge, a.value.shape).copy()),)

    return _record(val, (a,), bw)


def amax(a):
    a = as_variable(a)
    flat = a.value.ravel()
    k = int(np.argmax(flat))
    val = np.asarray(flat[k])

    def bw(g):
        out = np.zeros_like(a.value)
        out.ravel()[k] = g
        return ((a, out),)

    return _record(val, (a,), bw)


def amin(a):
    a = as_variable(a)
    flat = a.value.ravel()
    k = int(np.argmin(flat))
    val = np.asarray(flat[k])

    def bw(g):
        out = np.zeros_like(a.value)
        out.ravel()[k] = g
        return ((a, out),)

    return _record(val, (a,), bw)


def clamp_min(a, floor):
    a = as_variable(a)
    floor = float(floor)
    val = np.maximum(a.value, floor)

    def bw(g):
        return ((a, g * (a.value > floor)),)

    return _record(val, (a,), bw)


def sort(a, axis=-1):
    """Ascending sort whose forward permutation is frozen for backward.

    Stable, so ties route adjoints reproducibly.
    """
    a = as_variable(a)
    perm = np.argsort(a.value, axis=axis, kind="stable")
    val = np.take_along_axis(a.value, perm, axis=axis)

    def bw(g):
        out = np.empty_like(a.value)
        if _SORT_ADJOINT_FAULT:
            # deliberately wrong routing (identity permutation)
            return ((a, g.copy()),)
        np.put_along_axis(out, perm, g, axis=axis)
        return ((a, out),)

    return _record(val, (a,), bw)


def take(a, indices, axis=0):
    """Gather along an axis; backward scatter-adds into the source."""
    a = as_variable(a)
    idx = np.asarray(indices, dtype=np.intp)
    val = np.take(a.value, idx, axis=axis)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return ((a, out),)

    return _record(val, (a,), bw)


def transpose(a):
    a = as_variable(a)
    if a.value.ndim != 2:
        raise ContractViolation(f"transpose expects a matrix, got shape {a.value.shape}")
    val = a.value.T.copy()

    def bw(g):
        return ((a, g.T),)

    return _record(val, (a,), bw)


def reshape(a, shape):
    a = as_variable(a)
    val = a.value.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.value.shape)),)

    return _record(val, (a,), bw)


def scatter_matrix(vals, rows, cols, shape):
    """Place a vector of entries into a zeros matrix at (rows, cols).

    Index pairs must be distinct. Backward gathers the adjoint at the same
    positions.
    """
    vals = as_variable(vals)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if vals.value.ndim != 1 or rows.shape != cols.shape or rows.shape != vals.value.shape:
        raise ContractViolation(
            f"scatter_matrix expects matching 1D entries/rows/cols, got {vals.value.shape}, {rows.shape}, {cols.shape}"
        )
    out_val = np.zeros(shape, dtype=np.float64)
    out_val[rows, cols] = vals.value

    def bw(g):
        return ((vals, g[rows, cols]),)

    return _record(out_val, (vals,), bw)


def eig_extremes(a):
    """Smallest and largest eigenvalue of a symmetric matrix, as a 2-vector.

    The adjoint of a simple eigenvalue through its unit eigenvector v is
    v v^T; callers are responsible for skipping the gradient when the
    extreme eigenvalues are numerically repeated.
    """
    a = as_variable(a)
    m = a.value
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolation(f"eig_extremes expects a square matrix, got {m.shape}")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    lo, hi = v[:, 0], v[:, -1]
    val = np.array([w[0], w[-1]])

    def bw(g):
        return ((a, g[0] * np.outer(lo, lo) + g[1] * np.outer(hi, hi)),)

    return _record(val, (a,), bw)


def select(a, index):
    """Single-element pick from a 1D vector."""
    a = as_variable(a)
    k = int(index)
    val = np.asarray(a.value[k])

    def bw(g):
        out = np.zeros_like(a.value)
        out[k] = g
        return ((a, out),)

    return _record(val, (a,), bw)
