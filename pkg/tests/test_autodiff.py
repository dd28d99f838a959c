import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifoldmc import autodiff as ad
from manifoldmc.autodiff import Dual2


def scalar_fn(x):
    # composition exercising products, quotients, powers and transcendentals
    return ad.exp(x[0] * x[1]) / (1.0 + x[0] ** 2) + ad.sin(x[1]) * ad.log(4.0 + x[0])


def analytic_check_point(x0, x1):
    x = np.array([x0, x1])
    vals, jac, hess = ad.value_jacobian_hessian(lambda v: [scalar_fn(v)], x)
    fd_jac = ad.central_difference_jacobian(
        lambda v: np.array([float(scalar_fn(list(v)))]), x
    )
    fd_hess = ad.central_difference_jacobian(
        lambda v: ad.value_jacobian_hessian(lambda w: [scalar_fn(w)], v)[1][0], x
    )
    return vals, jac, hess, fd_jac, fd_hess


finite_floats = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)


@given(finite_floats, finite_floats)
@settings(max_examples=50, deadline=None)
def test_gradient_and_hessian_match_finite_differences(x0, x1):
    _, jac, hess, fd_jac, fd_hess = analytic_check_point(x0, x1)
    assert np.allclose(jac, fd_jac, rtol=1e-6, atol=1e-6)
    assert np.allclose(hess[0], fd_hess, rtol=1e-4, atol=1e-4)
    assert np.allclose(hess[0], hess[0].T)


@given(finite_floats, finite_floats)
@settings(max_examples=30, deadline=None)
def test_chain_rule_second_order(a, b):
    # f(g(t)) with g = (a t + b, t^2): compare against hand-derived series
    def composed(v):
        t = v[0]
        return [scalar_fn([a * t + b, t * t])]

    t0 = 0.3
    _, jac, hess = ad.value_jacobian_hessian(composed, np.array([t0]))
    h = 1e-4
    f = lambda t: float(scalar_fn([a * t + b, t * t]))
    fd1 = (f(t0 + h) - f(t0 - h)) / (2 * h)
    fd2 = (f(t0 + h) - 2 * f(t0) + f(t0 - h)) / h**2
    assert jac[0, 0] == pytest.approx(fd1, rel=1e-5, abs=1e-5)
    assert hess[0, 0, 0] == pytest.approx(fd2, rel=1e-3, abs=1e-3)


def test_known_values():
    x = ad.seed(np.array([2.0]))[0]
    y = x * x * x  # x^3: f=8, f'=12, f''=12
    assert y.val == 8.0
    assert y.grad[0] == 12.0
    assert y.hess[0, 0] == 12.0
    z = 1.0 / x
    assert z.val == 0.5
    assert z.grad[0] == -0.25
    assert z.hess[0, 0] == 0.25  # 2/x^3


def test_division_and_rsub():
    x = ad.seed(np.array([1.5]))[0]
    expr = (3.0 - x) / (2.0 + x)
    f = lambda t: (3.0 - t) / (2.0 + t)
    h = 1e-6
    assert expr.val == pytest.approx(f(1.5))
    assert expr.grad[0] == pytest.approx((f(1.5 + h) - f(1.5 - h)) / (2 * h), rel=1e-6)


def test_pow_special_cases():
    x = ad.seed(np.array([3.0]))[0]
    assert (x**0).val == 1.0
    assert (x**0).grad[0] == 0.0
    assert (x**1).grad[0] == 1.0
    assert (2.0**x).val == pytest.approx(8.0)
    assert (2.0**x).grad[0] == pytest.approx(8.0 * math.log(2.0))


def test_tanh_cosh_sinh():
    x = ad.seed(np.array([0.7]))[0]
    t, c, s = ad.tanh(x), ad.cosh(x), ad.sinh(x)
    assert t.val == pytest.approx(math.tanh(0.7))
    assert (s / c).val == pytest.approx(t.val)
    assert (s / c).grad[0] == pytest.approx(t.grad[0], rel=1e-12)


def test_comparisons_use_values():
    x = ad.seed(np.array([1.0]))[0]
    assert x > 0.5 and x < 2.0 and x >= 1.0 and x <= 1.0
    assert float(x) == 1.0
