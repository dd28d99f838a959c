"""Forward-mode automatic differentiation carrying values, gradients and Hessians.

A :class:`Dual2` holds a truncated second-order Taylor expansion of a scalar
quantity with respect to a batch of ``d`` seed directions: the value, the
``d``-vector of first derivatives and the ``d x d`` matrix of second
derivatives.  Propagating all three through arithmetic gives full Jacobians
and Hessians of small functions in a single forward sweep, which is all the
geometry layer needs: latent dimensions are small-to-moderate in every model
shipped here, so dense tangent batches beat building a reverse-mode tape.

Functions written against the helpers at the bottom of this module (``exp``,
``log``, ...) evaluate transparently on floats and on :class:`Dual2` inputs.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Dual2",
    "seed",
    "value_jacobian_hessian",
    "jacobian",
    "hessian",
    "central_difference_jacobian",
    "fd_step",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sqrt",
    "cosh",
    "sinh",
]


class Dual2:
    """Second-order dual scalar: value, gradient vector and Hessian matrix.

    Arithmetic follows the truncated Taylor algebra
    ``f(x + t v) = f + t (g . v) + t^2/2 (v . H v) + O(t^3)``
    so composition obeys the first- and second-order chain rules.
    """

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val, grad, hess):
        self.val = float(val)
        self.grad = np.asarray(grad, dtype=float)
        self.hess = np.asarray(hess, dtype=float)

    @classmethod
    def variable(cls, val: float, index: int, dim: int) -> "Dual2":
        g = np.zeros(dim)
        g[index] = 1.0
        return cls(val, g, np.zeros((dim, dim)))

    @classmethod
    def constant(cls, val: float, dim: int) -> "Dual2":
        return cls(val, np.zeros(dim), np.zeros((dim, dim)))

    def _lift(self, other) -> "Dual2":
        if isinstance(other, Dual2):
            return other
        return Dual2.constant(float(other), self.grad.shape[0])

    # -- ring operations ---------------------------------------------------

    def __add__(self, other):
        o = self._lift(other)
        return Dual2(self.val + o.val, self.grad + o.grad, self.hess + o.hess)

    __radd__ = __add__

    def __neg__(self):
        return Dual2(-self.val, -self.grad, -self.hess)

    def __sub__(self, other):
        o = self._lift(other)
        return Dual2(self.val - o.val, self.grad - o.grad, self.hess - o.hess)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        o = self._lift(other)
        cross = np.outer(self.grad, o.grad)
        return Dual2(
            self.val * o.val,
            self.val * o.grad + o.val * self.grad,
            self.val * o.hess + o.val * self.hess + cross + cross.T,
        )

    __rmul__ = __mul__

    def _reciprocal(self):
        v = self.val
        inv = 1.0 / v
        outer = np.outer(self.grad, self.grad)
        return Dual2(inv, -self.grad * inv**2, -self.hess * inv**2 + 2.0 * outer * inv**3)

    def __truediv__(self, other):
        o = self._lift(other)
        return self * o._reciprocal()

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def __pow__(self, exponent):
        if isinstance(exponent, Dual2):
            return exp(log(self) * exponent)
        n = float(exponent)
        if n == 0:
            return Dual2.constant(1.0, self.grad.shape[0])
        return _apply(
            self,
            self.val**n,
            n * self.val ** (n - 1),
            n * (n - 1) * self.val ** (n - 2) if n != 1 else 0.0,
        )

    def __rpow__(self, base):
        return exp(self * math.log(base))

    # -- comparisons act on values ------------------------------------------

    def __lt__(self, other):
        return self.val < _value_of(other)

    def __le__(self, other):
        return self.val <= _value_of(other)

    def __gt__(self, other):
        return self.val > _value_of(other)

    def __ge__(self, other):
        return self.val >= _value_of(other)

    def __float__(self):
        return self.val

    def __repr__(self):
        return f"Dual2({self.val!r}, grad={self.grad!r})"

    # numpy elementwise hooks so np.exp etc. dispatch here
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def _value_of(x) -> float:
    return x.val if isinstance(x, Dual2) else float(x)


def _apply(x: Dual2, f: float, df: float, d2f: float) -> Dual2:
    """Chain rule for a scalar map applied to a dual scalar."""
    return Dual2(
        f,
        df * x.grad,
        df * x.hess + d2f * np.outer(x.grad, x.grad),
    )


def exp(x):
    if isinstance(x, Dual2):
        e = math.exp(x.val)
        return _apply(x, e, e, e)
    return math.exp(x)


def log(x):
    if isinstance(x, Dual2):
        return _apply(x, math.log(x.val), 1.0 / x.val, -1.0 / x.val**2)
    return math.log(x)


def sin(x):
    if isinstance(x, Dual2):
        return _apply(x, math.sin(x.val), math.cos(x.val), -math.sin(x.val))
    return math.sin(x)


def cos(x):
    if isinstance(x, Dual2):
        return _apply(x, math.cos(x.val), -math.sin(x.val), -math.cos(x.val))
    return math.cos(x)


def tanh(x):
    if isinstance(x, Dual2):
        t = math.tanh(x.val)
        return _apply(x, t, 1.0 - t * t, -2.0 * t * (1.0 - t * t))
    return math.tanh(x)


def cosh(x):
    if isinstance(x, Dual2):
        return _apply(x, math.cosh(x.val), math.sinh(x.val), math.cosh(x.val))
    return math.cosh(x)


def sinh(x):
    if isinstance(x, Dual2):
        return _apply(x, math.sinh(x.val), math.cosh(x.val), math.sinh(x.val))
    return math.sinh(x)


def sqrt(x):
    if isinstance(x, Dual2):
        s = math.sqrt(x.val)
        return _apply(x, s, 0.5 / s, -0.25 / s**3)
    return math.sqrt(x)


def seed(x) -> list[Dual2]:
    """Wrap a point ``x`` as a list of independent dual variables."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    return [Dual2.variable(x[i], i, d) for i in range(d)]


def value_jacobian_hessian(fn, x):
    """Evaluate ``fn`` at ``x`` returning value, Jacobian and Hessian stack.

    ``fn`` must map a sequence of scalars to a sequence of scalars (or a
    single scalar) using arithmetic that :class:`Dual2` supports.  Returns
    ``(F, J, H)`` with shapes ``(m,)``, ``(m, d)`` and ``(m, d, d)``.
    """
    x = np.asarray(x, dtype=float)
    out = fn(seed(x))
    if isinstance(out, Dual2):
        out = [out]
    d = x.shape[0]
    vals = np.empty(len(out))
    jac = np.empty((len(out), d))
    hess = np.empty((len(out), d, d))
    for i, o in enumerate(out):
        if isinstance(o, Dual2):
            vals[i] = o.val
            jac[i] = o.grad
            hess[i] = o.hess
        else:  # output independent of the inputs
            vals[i] = float(o)
            jac[i] = 0.0
            hess[i] = 0.0
    return vals, jac, hess


def jacobian(fn, x) -> np.ndarray:
    return value_jacobian_hessian(fn, x)[1]


def hessian(fn, x) -> np.ndarray:
    return value_jacobian_hessian(fn, x)[2]


def fd_step(xi: float) -> float:
    """Central-difference step ``cbrt(machine eps) * max(1, |xi|)``."""
    return float(np.cbrt(np.finfo(float).eps) * max(1.0, abs(xi)))


def central_difference_jacobian(fn, x, step=None) -> np.ndarray:
    """Dense central-difference Jacobian of a vector-valued callable.

    Used as the independent oracle when validating analytic or AD
    derivatives; takes no shortcuts through the code paths it checks.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.empty((f0.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        h = fd_step(x[i]) if step is None else step
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.atleast_1d(np.asarray(fn(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(xm), dtype=float))
        jac[:, i] = (fp - fm) / (2.0 * h)
    return jac
