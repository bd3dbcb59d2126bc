"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded
when at least one input requires a gradient.  ``tape.backward(loss)`` then
walks the record in reverse and accumulates ``dloss/dleaf`` into the
``grad`` slot of every leaf that requires a gradient.

Outside an active tape the same functions simply compute values, which is
what inference code (feature extraction, retrieval) relies on.

Every tensor is two-dimensional: scalars are ``(1, 1)`` and 1-D inputs are
promoted to a single row.  Binary operations broadcast along axes of
length one, which covers bias rows, per-row scale columns and scalars.
"""

import threading

import numpy as np

from .errors import ContractError, DimensionError, EmptyInputError, NumericDomainError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "elementwise",
    "reduce",
    "sum",
    "mean",
    "l2norm",
    "logsumexp",
    "take_rows",
    "concat_rows",
    "pairwise_euclidean",
    "stop_gradient",
]

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A 2-D float64 array with a gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        v = np.array(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim > 2:
            raise DimensionError(f"tensors are 2-D, got shape {v.shape}")
        self.value = v
        self.grad = np.zeros_like(v)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, value, requires_grad):
        t = cls.__new__(cls)
        t.value = value
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.value[0, 0])

    def numpy(self):
        return self.value.copy()

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and the innermost active tape on
    the current thread receives the records.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss):
        return backward(loss, self)


def backward(loss, tape):
    """Accumulate ``dloss/dleaf`` into every requires-grad leaf.

    Intermediate tensors get their gradient slot overwritten; leaves add to
    whatever is already there, so calling twice without zeroing doubles
    leaf gradients.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires a gradient")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        if loss.grad is None:
            raise ContractError("loss was not recorded on this tape")
        # the loss is itself a leaf
        loss.grad = loss.grad + 1.0
        return

    grads = {id(loss): np.ones((1, 1))}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        if key in grads:
            t.grad = t.grad + grads[key]


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(value, inputs, backward_fn):
    requires = any(t.requires_grad for t in inputs)
    tape = active_tape() if requires else None
    out = Tensor._wrap(value, tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(ax for ax in range(2) if shape[ax] == 1 and g.shape[ax] != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a, b, opname):
    for ax in range(2):
        da, db = a.shape[ax], b.shape[ax]
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), back)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.value + b.value, (a, b), back)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.value - b.value, (a, b), back)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), back)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NumericDomainError("div: division by zero")
    out = av / bv

    def back(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _make(out, (a, b), back)


def neg(x):
    x = _as_tensor(x)
    return _make(-x.value, (x,), lambda g: (-g,))


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _make(c * x.value, (x,), lambda g: (c * g,))


def relu(x):
    x = _as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = _as_tensor(x)
    if np.any(x.value <= 0):
        raise NumericDomainError("log: input must be strictly positive")
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    x = _as_tensor(x)
    if np.any(x.value <= 0):
        raise NumericDomainError("sqrt: input must be strictly positive")
    out = np.sqrt(x.value)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


def clamp_min(x, floor):
    """``max(x, floor)`` with the gradient passed only where ``x > floor``."""
    x = _as_tensor(x)
    keep = x.value > floor
    return _make(np.where(keep, x.value, floor), (x,), lambda g: (g * keep,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "scale": scale,
}


def elementwise(op, *args):
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def _check_nonempty(x, opname):
    if x.value.size == 0:
        raise EmptyInputError(f"{opname}: empty input")


def sum(x, axis=None):
    """Sum over all entries (scalar) or along ``axis`` keeping 2-D shape."""
    x = _as_tensor(x)
    _check_nonempty(x, "sum")
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=True)
    if axis is None:
        out = out.reshape(1, 1)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x, axis=None):
    x = _as_tensor(x)
    _check_nonempty(x, "mean")
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def l2norm(x, axis=None):
    """Euclidean norm; the gradient at the zero vector is taken as zero."""
    x = _as_tensor(x)
    _check_nonempty(x, "l2norm")
    xv = x.value
    out = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    if axis is None:
        out = out.reshape(1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(out > 0, xv / out, 0.0)
    return _make(out, (x,), lambda g: (g * unit,))


_REDUCE = {"sum": sum, "mean": mean, "l2norm": l2norm}


def reduce(op, x, axis=None):
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None
    return fn(x, axis)


def logsumexp(x, axis=1, mask=None):
    """Stable log-sum-exp along ``axis``; entries where ``mask`` is False are skipped.

    Terms are summed in ascending order of value, so the result does not
    depend on the order of entries within a slice.
    """
    x = _as_tensor(x)
    _check_nonempty(x, "logsumexp")
    xv = x.value
    if mask is None:
        mask = np.ones(xv.shape, dtype=bool)
    elif mask.shape != xv.shape:
        raise DimensionError(f"logsumexp: mask shape {mask.shape} != input shape {xv.shape}")
    if not np.all(mask.any(axis=axis)):
        raise EmptyInputError("logsumexp: a slice has no unmasked entries")
    masked = np.where(mask, xv, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.exp(masked - m)
    s = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    return _make(out, (x,), lambda g: (g * soft,))


def take_rows(x, index):
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.value[index], (x,), back)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=0))

    return _make(np.vstack([t.value for t in tensors]), tuple(tensors), back)


def pairwise_euclidean(a, b):
    """Matrix of ``||a_i - b_j||``; zero distances get a zero gradient."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_euclidean: shapes {a.shape} and {b.shape} differ in width")
    av, bv = a.value, b.value
    sq = (av * av).sum(1)[:, None] + (bv * bv).sum(1)[None, :] - 2.0 * (av @ bv.T)
    d = np.sqrt(np.maximum(sq, 0.0))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0, g / d, 0.0)
        ga = w.sum(1)[:, None] * av - w @ bv
        gb = w.sum(0)[:, None] * bv - w.T @ av
        return ga, gb

    return _make(d, (a, b), back)


def stop_gradient(x):
    """Identity in the forward pass; contributes no gradient."""
    x = _as_tensor(x)
    return Tensor._wrap(x.value, False)
