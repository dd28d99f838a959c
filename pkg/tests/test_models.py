import numpy as np
import pytest

from manifoldmc import autodiff as ad
from manifoldmc import models as md
from manifoldmc import zoo
from manifoldmc.exceptions import DomainError


class TestToyForward:
    def test_on_manifold_point(self, toy_model):
        assert md.evaluate_forward(toy_model, [0.0, 1.0])[0] == pytest.approx(1.0)

    def test_origin(self, toy_model):
        assert md.evaluate_forward(toy_model, [0.0, 0.0])[0] == pytest.approx(0.0)

    def test_unit_theta0(self, toy_model):
        assert md.evaluate_forward(toy_model, [1.0, 0.0])[0] == pytest.approx(0.5)

    def test_repeated_calls_bit_identical(self, toy_model, rng):
        theta = rng.standard_normal(2)
        a = md.evaluate_forward(toy_model, theta)
        b = md.evaluate_forward(toy_model, theta)
        assert np.array_equal(a, b)


class TestToyJacobian:
    def test_critical_point(self, toy_model):
        assert np.allclose(md.jacobian_forward(toy_model, [0.0, 0.0]), [[0.0, 0.0]])

    def test_against_finite_differences(self, toy_model):
        # frozen from the central-difference oracle at theta=(1,1), h=1e-5
        jac = md.jacobian_forward(toy_model, [1.0, 1.0])
        assert np.allclose(jac, [[3.0, 2.0]], atol=1e-8)
        fd = ad.central_difference_jacobian(
            lambda th: md.evaluate_forward(toy_model, th), np.array([1.0, 1.0]), step=1e-5
        )
        assert np.allclose(jac, fd, atol=1e-8)

    def test_linear_model_jacobian_constant(self, linear_model, rng):
        j1 = md.jacobian_forward(linear_model, rng.standard_normal(3))
        j2 = md.jacobian_forward(linear_model, rng.standard_normal(3))
        assert np.array_equal(j1, j2)


class TestDirectionalJacobianDerivative:
    def test_linear_model_zero(self, linear_model, rng):
        v = rng.standard_normal(3)
        out = md.directional_jacobian_derivative(linear_model, rng.standard_normal(3), v)
        assert np.allclose(out, 0.0)

    def test_toy_value_from_fd_oracle(self, toy_model):
        # oracle: finite difference of jacobian_forward along v, h=1e-5
        theta, v = np.array([1.0, 0.0]), np.array([1.0, 0.0])
        h = 1e-5
        fd = (
            md.jacobian_forward(toy_model, theta + h * v)
            - md.jacobian_forward(toy_model, theta - h * v)
        ) / (2 * h)
        got = md.directional_jacobian_derivative(toy_model, theta, v)
        assert np.allclose(got, fd, atol=1e-6)
        assert np.allclose(got, [[11.0, 0.0]], atol=1e-12)

    def test_zero_direction(self, toy_model, rng):
        out = md.directional_jacobian_derivative(
            toy_model, rng.standard_normal(2), np.zeros(2)
        )
        assert np.allclose(out, 0.0)

    def test_linear_in_direction(self, toy_model, rng):
        theta = rng.standard_normal(2)
        v, w = rng.standard_normal(2), rng.standard_normal(2)
        a, b = 0.7, -1.3
        lhs = md.directional_jacobian_derivative(toy_model, theta, a * v + b * w)
        rhs = a * md.directional_jacobian_derivative(toy_model, theta, v) + (
            b * md.directional_jacobian_derivative(toy_model, theta, w)
        )
        assert np.allclose(lhs, rhs, atol=1e-10)


def _random_generic_model(rng):
    """Random smooth model written generically so AD applies."""
    d_theta, d_y = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    w = rng.standard_normal((d_y, d_theta))
    a = rng.standard_normal(d_y)

    def forward(theta):
        out = []
        for i in range(d_y):
            acc = 0.0
            for j in range(d_theta):
                acc = acc + w[i, j] * theta[j]
            out.append(ad.sin(acc) + a[i] * theta[0] * theta[d_theta - 1])
        return out

    return md.ModelSpec(
        dim_theta=d_theta,
        dim_y=d_y,
        observed=rng.standard_normal(d_y),
        forward=forward,
        noise_scale=0.5,
        prior_potential_theta=lambda th: 0.5 * float(np.dot(th, th)),
        grad_prior_theta=lambda th: np.asarray(th, float),
    )


def test_ad_jacobians_match_fd_on_random_models():
    rng = np.random.default_rng(7)
    for _ in range(100):
        model = _random_generic_model(rng)
        theta = rng.standard_normal(model.dim_theta)
        jac = md.jacobian_forward(model, theta)
        fd = ad.central_difference_jacobian(
            lambda th: md.evaluate_forward(model, th), theta
        )
        scale = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(jac - fd)) / scale <= 1e-6


def test_nonfinite_forward_raises_domain_error():
    model = md.ModelSpec(
        dim_theta=1,
        dim_y=2,
        observed=np.zeros(2),
        forward=lambda th: np.array([1.0, np.inf]),
        noise_scale=1.0,
        prior_potential_theta=lambda th: 0.0,
    )
    with pytest.raises(DomainError, match="index 1"):
        md.evaluate_forward(model, np.zeros(1))


def test_noise_scale_must_be_positive():
    model = md.ModelSpec(
        dim_theta=1,
        dim_y=1,
        observed=np.zeros(1),
        forward=lambda th: np.zeros(1),
        noise_scale=lambda th: float(th[0]),
        prior_potential_theta=lambda th: 0.0,
    )
    with pytest.raises(DomainError):
        md.noise_value(model, np.array([-1.0]))


class TestValidation:
    def test_shipped_toy_model_passes(self, toy_model, rng):
        report = md.validate_model(toy_model, rng)
        assert all(check["passed"] for check in report)

    def test_corrupted_jacobian_fails(self, rng):
        model = zoo.toy_loop_model(0.1)
        bad = md.ModelSpec(
            **{
                **{f: getattr(model, f) for f in model.__dataclass_fields__},
                "jacobian": lambda th: np.array([[4.0 * th[0] ** 3, 2.0 * th[1]]]),
            }
        )
        report = md.validate_model(bad, rng)
        assert not all(check["passed"] for check in report)


def test_neg_log_posterior_gradient(toy_model, rng):
    theta = rng.standard_normal(2)
    fd = ad.central_difference_jacobian(
        lambda th: np.array([md.neg_log_posterior(toy_model, th)]), theta
    )[0]
    assert np.allclose(md.grad_neg_log_posterior(toy_model, theta), fd, atol=1e-6)


def test_fisher_metric_toy_value():
    model = zoo.toy_loop_model(0.1)
    metric = md.fisher_metric(model, np.array([1.0, 1.0]))
    expected = np.eye(2) + 100.0 * np.array([[9.0, 6.0], [6.0, 4.0]])
    assert np.allclose(metric, expected)
