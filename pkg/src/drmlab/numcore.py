"""Minimal float64 numeric core.

Validated dense operations (matmul, softmax, cross-entropy), a small
reverse-mode tape (`Var`) covering exactly the operations the training
losses need, and central-difference gradient checking. Not a
general-purpose autodiff system: no broadcasting beyond what the losses
use, no convolutions, CPU only.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


def _require_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def as_matrix(a) -> np.ndarray:
    """Convert to a finite float64 2-D array, validating shape and content."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {a.shape}")
    return _require_finite(a, "matrix")


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D arrays with explicit shape validation."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis, with max subtraction against overflow."""
    x = np.asarray(logits, dtype=np.float64)
    _require_finite(x, "softmax input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the labels, log clipped at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.ndim != 1 or p.shape[0] != y.shape[0]:
        raise DimensionError(f"cross_entropy shapes: probs {p.shape}, labels {y.shape}")
    picked = p[np.arange(y.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def grad_check(f: Callable, theta, h: float = 1e-5) -> float:
    """Compare an analytic gradient against central finite differences.

    `f` maps a flat float64 vector to ``(value, gradient)``. Returns the
    max over coordinates of ``|analytic - central| / max(1, |analytic|)``.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h must be in (0, 1e-2], got {h}")
    theta = np.asarray(theta, dtype=np.float64).copy()
    value, grad = f(theta)
    if not np.isfinite(value):
        raise NumericError("non-finite loss at the base point")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise DimensionError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped.flat[i] += h
        up, _ = f(bumped)
        bumped.flat[i] -= 2.0 * h
        down, _ = f(bumped)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        fd = (up - down) / (2.0 * h)
        a = grad.flat[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _lift(x) -> "Var":
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    """Detach: the plain float64 array behind a Var or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


class Var:
    """Node in a reverse-mode tape over float64 arrays.

    Build expressions with operators and methods, call ``backward()`` on a
    scalar result, then read ``.grad`` off the leaves. Plain arrays entering
    an operation are lifted to constant leaves, so anything not explicitly
    wrapped in a Var is stop-gradient by construction.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        v = np.asarray(value, dtype=np.float64)
        _require_finite(v, "tape value")
        self.value = v
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        if self.value.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                stack.append((node._parents[i], 0))
            else:
                order.append(node)
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is not None:
                    parent.grad = parent.grad + g

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        a, b = self, _lift(other)
        return Var(
            a.value + b.value,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, _lift(other)
        return Var(
            a.value * b.value,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __sub__(self, other):
        a, b = self, _lift(other)
        return Var(
            a.value - b.value,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return _lift(other).__sub__(self)

    def __truediv__(self, other):
        a, b = self, _lift(other)
        return Var(
            a.value / b.value,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / (b.value**2), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _lift(other).__truediv__(self)

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        a, b = self, _lift(other)
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise DimensionError(f"matmul needs 2-D operands: {a.shape} x {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return Var(
            a.value @ b.value,
            (a, b),
            lambda g: (g @ b.value.T, a.value.T @ g),
        )

    # -- elementwise -------------------------------------------------------

    def tanh(self):
        t = np.tanh(self.value)
        return Var(t, (self,), lambda g: (g * (1.0 - t * t),))

    def exp(self):
        e = np.exp(self.value)
        return Var(e, (self,), lambda g: (g * e,))

    def log(self):
        if np.any(self.value <= 0.0):
            raise NumericError("log of non-positive value on the tape")
        return Var(np.log(self.value), (self,), lambda g: (g / self.value,))

    def softplus(self):
        v = np.logaddexp(0.0, self.value)
        sig = 1.0 / (1.0 + np.exp(-self.value))
        return Var(v, (self,), lambda g: (g * sig,))

    def square(self):
        return Var(self.value**2, (self,), lambda g: (g * 2.0 * self.value,))

    def clip_min(self, floor: float):
        """Lower clip; gradient flows only through unclipped entries."""
        mask = self.value > floor
        return Var(np.maximum(self.value, floor), (self,), lambda g: (g * mask,))

    # -- reductions and reshaping -------------------------------------------

    def sum(self, axis=None):
        if axis is None:
            shape = self.shape
            return Var(self.value.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))
        val = self.value.sum(axis=axis)
        return Var(
            val,
            (self,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), self.shape).copy(),),
        )

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return Var(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        if self.value.ndim != 2:
            raise DimensionError(f"transpose needs a 2-D operand, got {self.shape}")
        return Var(self.value.T, (self,), lambda g: (g.T,))

    def __getitem__(self, key):
        def vjp(g):
            out = np.zeros_like(self.value)
            np.add.at(out, key, g)
            return (out,)

        return Var(self.value[key], (self,), vjp)

    def take_rows(self, idx):
        """Select rows of a 2-D value by integer index array."""
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(self.value)
            np.add.at(out, idx, g)
            return (out,)

        return Var(self.value[idx], (self,), vjp)

    def pick(self, labels):
        """out[i] = value[i, labels[i]] for a 2-D value."""
        y = np.asarray(labels, dtype=np.int64)
        rows = np.arange(self.value.shape[0])

        def vjp(g):
            out = np.zeros_like(self.value)
            np.add.at(out, (rows, y), g)
            return (out,)

        return Var(self.value[rows, y], (self,), vjp)

    # -- fused classification ops -------------------------------------------

    def softmax(self):
        s = softmax(self.value)

        def vjp(g):
            dot = np.sum(g * s, axis=-1, keepdims=True)
            return (s * (g - dot),)

        return Var(s, (self,), vjp)

    def log_softmax(self):
        x = self.value
        shifted = x - np.max(x, axis=-1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        logp = shifted - logz
        s = np.exp(logp)

        def vjp(g):
            return (g - s * np.sum(g, axis=-1, keepdims=True),)

        return Var(logp, (self,), vjp)
