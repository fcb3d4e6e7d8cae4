"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values compute eagerly; a Tape records the operations needed for one backward
pass. Ops only record while a tape is active (``with Tape() as tape:``) and only
when some input requires a gradient, so frozen or pure-data subgraphs cost
nothing. A tape may be entered several times before backward, but backward
consumes it: a second backward raises StaleTape.

Broadcasting follows numpy; gradients are summed back over broadcast axes.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, ShapeMismatch, StaleTape

__all__ = [
    "Tape",
    "Var",
    "param",
    "constant",
    "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "pow_const",
    "exp", "log", "sqrt", "tanh", "gelu", "log_sigmoid",
    "vsum", "vmean", "reshape", "transpose", "getitem",
    "stop_gradient", "log_softmax", "logsumexp",
]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records operations for a single backward pass."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise StaleTape("this tape has already been used for a backward pass")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)


class Var:
    """A float64 array plus the bookkeeping to backpropagate through it."""

    __slots__ = ("value", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, value, requires_grad=False, _parents=(), _grad_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
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
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def param(value) -> Var:
    """A trainable leaf."""
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    """A data leaf that never receives a gradient."""
    return Var(value, requires_grad=False)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, grad_fn) -> Var:
    needs = any(p.requires_grad for p in parents)
    out = Var(value, requires_grad=needs, _parents=parents, _grad_fn=grad_fn if needs else None)
    if needs and _TAPE_STACK:
        _TAPE_STACK[-1]._nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to shape after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(g, b.value.shape)))

    return _make(a.value + b.value, (a, b), grad_fn)


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(-g, b.value.shape)))

    return _make(a.value - b.value, (a, b), grad_fn)


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return (
            (a, _unbroadcast(g * b.value, a.value.shape)),
            (b, _unbroadcast(g * a.value, b.value.shape)),
        )

    return _make(a.value * b.value, (a, b), grad_fn)


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def grad_fn(g):
        return (
            (a, _unbroadcast(g / b.value, a.value.shape)),
            (b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
        )

    return _make(a.value / b.value, (a, b), grad_fn)


def neg(a) -> Var:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: ((a, -g),))


def pow_const(a, p: float) -> Var:
    a = _lift(a)
    p = float(p)

    def grad_fn(g):
        return ((a, g * p * a.value ** (p - 1.0)),)

    return _make(a.value**p, (a,), grad_fn)


def matmul(a, b) -> Var:
    # einsum with fixed subscripts keeps the accumulation order independent of
    # the leading (batch) dimensions, so a row's result does not change when it
    # is computed inside a larger batch. Plain @ does not guarantee that.
    a, b = _lift(a), _lift(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch("matmul: operands must have at least 2 dimensions")

    def grad_fn(g):
        ga = np.einsum("...mn,...kn->...mk", g, b.value)
        gb = np.einsum("...mk,...mn->...kn", a.value, g)
        return (
            (a, _unbroadcast(ga, a.value.shape)),
            (b, _unbroadcast(gb, b.value.shape)),
        )

    return _make(np.einsum("...mk,...kn->...mn", a.value, b.value), (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a) -> Var:
    a = _lift(a)
    out_val = np.exp(a.value)
    return _make(out_val, (a,), lambda g: ((a, g * out_val),))


def log(a) -> Var:
    a = _lift(a)
    return _make(np.log(a.value), (a,), lambda g: ((a, g / a.value),))


def sqrt(a) -> Var:
    a = _lift(a)
    out_val = np.sqrt(a.value)
    return _make(out_val, (a,), lambda g: ((a, g * 0.5 / out_val),))


def tanh(a) -> Var:
    a = _lift(a)
    out_val = np.tanh(a.value)
    return _make(out_val, (a,), lambda g: ((a, g * (1.0 - out_val * out_val)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Var:
    """Tanh-form GELU; the backward pass is the exact derivative of this form."""
    a = _lift(a)
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_val = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return ((a, g * d),)

    return _make(out_val, (a,), grad_fn)


def _expit(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic sigmoid."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a) -> Var:
    """log(sigmoid(x)) computed as -log1p(exp(-x)) without overflow."""
    a = _lift(a)
    out_val = -np.logaddexp(0.0, -a.value)

    def grad_fn(g):
        return ((a, g * _expit(-a.value)),)

    return _make(out_val, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def vsum(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.value.shape).copy()),)

    return _make(out_val, (a,), grad_fn)


def vmean(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    if axis is None:
        count = a.value.size
    else:
        count = np.prod([a.value.shape[ax] for ax in np.atleast_1d(axis)])
    out_val = a.value.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.value.shape).copy()),)

    return _make(out_val, (a,), grad_fn)


def reshape(a, shape) -> Var:
    a = _lift(a)
    orig = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: ((a, g.reshape(orig)),))


def transpose(a, axes) -> Var:
    a = _lift(a)
    inverse = np.argsort(axes)
    return _make(
        np.transpose(a.value, axes), (a,), lambda g: ((a, np.transpose(g, inverse)),)
    )


def getitem(a, key) -> Var:
    a = _lift(a)

    def grad_fn(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return ((a, full),)

    return _make(a.value[key], (a,), grad_fn)


def stop_gradient(a) -> Var:
    """Detach: same value, no gradient flows back."""
    a = _lift(a)
    return Var(a.value.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# composite softmax helpers
# ---------------------------------------------------------------------------

def logsumexp(a, axis, keepdims=False) -> Var:
    """Stable logsumexp; the subtracted max is treated as a constant, which
    leaves the gradient exact."""
    a = _lift(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all -inf rows stay well-defined
    z = exp(sub(a, m))
    out = add(log(vsum(z, axis=axis, keepdims=True)), m)
    if not keepdims:
        kept = tuple(d for i, d in enumerate(out.value.shape) if i != axis % out.value.ndim)
        out = reshape(out, kept)
    return out


def log_softmax(a, axis) -> Var:
    a = _lift(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Var) -> dict[int, np.ndarray]:
    """Run reverse accumulation from a scalar root.

    Returns a mapping id(leaf Var) -> gradient for every requires_grad leaf
    reached from the root. Leaves not reached (or a root outside the tape) get
    no entry; callers treat missing entries as zero.
    """
    if tape._consumed:
        raise StaleTape("backward was already called on this tape")
    tape._consumed = True
    if root.value.size != 1:
        raise DegenerateInput(f"backward: root must be scalar, got shape {root.value.shape}")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaf_grads: dict[int, np.ndarray] = {}
    if root.requires_grad and root._grad_fn is None:
        leaf_grads[id(root)] = np.ones_like(root.value)

    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in node._grad_fn(g):
            if not parent.requires_grad:
                continue
            target = leaf_grads if parent._grad_fn is None else grads
            key = id(parent)
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    return leaf_grads
