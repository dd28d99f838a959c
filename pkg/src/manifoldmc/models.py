"""Differentiable generative models with additive noise.

A :class:`ModelSpec` bundles everything the samplers need to know about an
observation model ``y = F(theta) + sigma(theta) * eta``: the forward map, the
noise scale, prior potentials and (optionally) analytic derivatives.  When
analytic derivatives are absent they are filled in by the forward-mode engine
in :mod:`manifoldmc.autodiff`, provided the forward map is written with
arithmetic the dual scalars support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .exceptions import DomainError

Array = np.ndarray


def _check_finite(arr: Array, what: str) -> Array:
    if not np.isfinite(arr).all():
        idx = int(np.flatnonzero(~np.isfinite(arr).ravel())[0])
        raise DomainError(f"non-finite {what} at flat index {idx}")
    return arr


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of an additive-noise model.

    Required fields define the model itself; the remaining callables are
    analytic derivative overrides.  Any override left as ``None`` is
    computed by forward-mode AD, which requires ``forward`` (and
    ``noise_scale`` if position dependent) to accept a sequence of
    :class:`~manifoldmc.autodiff.Dual2` scalars.
    """

    dim_theta: int
    dim_y: int
    observed: Array
    forward: Callable
    noise_scale: Callable | float
    prior_potential_theta: Callable
    prior_potential_eta: Optional[Callable] = None
    # analytic derivative overrides
    jacobian: Optional[Callable] = None
    forward_hessian: Optional[Callable] = None
    noise_jacobian: Optional[Callable] = None
    noise_hessian: Optional[Callable] = None
    grad_prior_theta: Optional[Callable] = None
    grad_prior_eta: Optional[Callable] = None
    prior_sample: Optional[Callable] = None
    name: str = "model"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_theta < 1 or self.dim_y < 1:
            raise ValueError("dimensions must be positive")
        observed = np.asarray(self.observed, dtype=float).reshape(self.dim_y)
        object.__setattr__(self, "observed", observed)

    @property
    def constant_noise(self) -> bool:
        return not callable(self.noise_scale)


# -- forward map ------------------------------------------------------------


def evaluate_forward(model: ModelSpec, theta: Array) -> Array:
    """Evaluate ``F(theta)``; pure, raises ``DomainError`` on non-finite output."""
    theta = np.asarray(theta, dtype=float)
    out = np.asarray(model.forward(theta), dtype=float).reshape(model.dim_y)
    return _check_finite(out, "forward output")


def jacobian_forward(model: ModelSpec, theta: Array) -> Array:
    """Jacobian ``DF(theta)`` of shape ``(dim_y, dim_theta)``."""
    theta = np.asarray(theta, dtype=float)
    if model.jacobian is not None:
        jac = np.asarray(model.jacobian(theta), dtype=float)
    else:
        jac = ad.jacobian(model.forward, theta)
    jac = jac.reshape(model.dim_y, model.dim_theta)
    return _check_finite(jac, "forward Jacobian")


def hessian_forward(model: ModelSpec, theta: Array) -> Array:
    """Second derivative stack ``(dim_y, dim_theta, dim_theta)``."""
    theta = np.asarray(theta, dtype=float)
    if model.forward_hessian is not None:
        hess = np.asarray(model.forward_hessian(theta), dtype=float)
    else:
        hess = ad.hessian(model.forward, theta)
    hess = hess.reshape(model.dim_y, model.dim_theta, model.dim_theta)
    return _check_finite(hess, "forward Hessian")


def directional_jacobian_derivative(model: ModelSpec, theta: Array, v: Array) -> Array:
    """Directional derivative of the Jacobian, ``d/dt DF(theta + t v)`` at 0.

    Linear in ``v``; vanishes identically for linear forward maps.
    """
    v = np.asarray(v, dtype=float)
    return np.einsum("ijk,k->ij", hessian_forward(model, theta), v)


# -- noise scale ------------------------------------------------------------


def noise_value(model: ModelSpec, theta: Array) -> float:
    s = model.noise_scale if model.constant_noise else model.noise_scale(np.asarray(theta, dtype=float))
    s = float(s)
    if not np.isfinite(s) or s <= 0.0:
        raise DomainError(f"noise scale must be positive and finite, got {s}")
    return s


def noise_jacobian(model: ModelSpec, theta: Array) -> Array:
    """Gradient of the noise scale, zeros when the scale is constant."""
    if model.constant_noise:
        return np.zeros(model.dim_theta)
    theta = np.asarray(theta, dtype=float)
    if model.noise_jacobian is not None:
        return np.asarray(model.noise_jacobian(theta), dtype=float).reshape(model.dim_theta)
    return ad.jacobian(lambda th: [model.noise_scale(th)], theta)[0]


def noise_hessian(model: ModelSpec, theta: Array) -> Array:
    if model.constant_noise:
        return np.zeros((model.dim_theta, model.dim_theta))
    theta = np.asarray(theta, dtype=float)
    if model.noise_hessian is not None:
        return np.asarray(model.noise_hessian(theta), dtype=float).reshape(
            model.dim_theta, model.dim_theta
        )
    return ad.hessian(lambda th: [model.noise_scale(th)], theta)[0]


# -- priors ------------------------------------------------------------------


def prior_potential_theta(model: ModelSpec, theta: Array) -> float:
    return float(model.prior_potential_theta(np.asarray(theta, dtype=float)))


def grad_prior_theta(model: ModelSpec, theta: Array) -> Array:
    theta = np.asarray(theta, dtype=float)
    if model.grad_prior_theta is not None:
        return np.asarray(model.grad_prior_theta(theta), dtype=float).reshape(model.dim_theta)
    return ad.jacobian(lambda th: [model.prior_potential_theta(th)], theta)[0]


def prior_potential_eta(model: ModelSpec, eta: Array) -> float:
    eta = np.asarray(eta, dtype=float)
    if model.prior_potential_eta is not None:
        return float(model.prior_potential_eta(eta))
    return 0.5 * float(eta @ eta)


def grad_prior_eta(model: ModelSpec, eta: Array) -> Array:
    eta = np.asarray(eta, dtype=float)
    if model.prior_potential_eta is None:
        return eta
    if model.grad_prior_eta is not None:
        return np.asarray(model.grad_prior_eta(eta), dtype=float).reshape(model.dim_y)
    return ad.jacobian(lambda e: [model.prior_potential_eta(e)], eta)[0]


# -- posterior on the original space -----------------------------------------


def neg_log_posterior(model: ModelSpec, theta: Array) -> float:
    """Negative log posterior density up to a constant."""
    theta = np.asarray(theta, dtype=float)
    resid = model.observed - evaluate_forward(model, theta)
    s = noise_value(model, theta)
    return (
        prior_potential_theta(model, theta)
        + 0.5 * float(resid @ resid) / s**2
        + model.dim_y * np.log(s)
    )


def grad_neg_log_posterior(model: ModelSpec, theta: Array) -> Array:
    theta = np.asarray(theta, dtype=float)
    resid = model.observed - evaluate_forward(model, theta)
    s = noise_value(model, theta)
    g = grad_prior_theta(model, theta) - jacobian_forward(model, theta).T @ resid / s**2
    if not model.constant_noise:
        ds = noise_jacobian(model, theta)
        g += (-float(resid @ resid) / s**3 + model.dim_y / s) * ds
    return g


def fisher_metric(model: ModelSpec, theta: Array) -> Array:
    """Expected-information metric ``I + DF' DF / sigma^2``.

    For position-dependent noise the Jacobian block is extended with the
    ``eta * Dsigma`` term evaluated at the noise vector matching the data,
    which reduces to the familiar expression when sigma is constant.
    """
    theta = np.asarray(theta, dtype=float)
    s = noise_value(model, theta)
    a = jacobian_forward(model, theta)
    if not model.constant_noise:
        eta = (model.observed - evaluate_forward(model, theta)) / s
        a = a + np.outer(eta, noise_jacobian(model, theta))
    return np.eye(model.dim_theta) + (a.T @ a) / s**2


# -- validation ---------------------------------------------------------------


def fisher_metric_grad(model: ModelSpec, theta: Array) -> Array:
    """Derivative tensor ``d M[i,j] / d theta[k]`` of the information metric.

    Only implemented for constant noise scales, where
    ``M = I + DF' DF / sigma^2``.
    """
    if not model.constant_noise:
        raise NotImplementedError("analytic metric gradient assumes constant sigma")
    theta = np.asarray(theta, dtype=float)
    s = noise_value(model, theta)
    jac = jacobian_forward(model, theta)
    hess = hessian_forward(model, theta)  # (d_y, d, d), last axis differentiates
    half = np.einsum("aik,aj->ijk", hess, jac)
    return (half + half.transpose(1, 0, 2)) / s**2


def validate_model(
    model: ModelSpec,
    rng: np.random.Generator,
    n_points: int = 20,
    rel_tol: float = 1e-6,
    point_sampler: Optional[Callable] = None,
) -> list[dict]:
    """Cross-check supplied derivatives against central finite differences.

    Returns one record per check with the worst relative error observed over
    ``n_points`` random points.  A record with ``passed=False`` indicates a
    derivative implementation that disagrees with the finite-difference
    oracle beyond ``rel_tol``.
    """

    def draw():
        if point_sampler is not None:
            return np.asarray(point_sampler(rng), dtype=float)
        if model.prior_sample is not None:
            return np.asarray(model.prior_sample(rng), dtype=float)
        return rng.standard_normal(model.dim_theta)

    checks = []

    def run_check(name, got_fn, oracle_fn):
        worst = 0.0
        for _ in range(n_points):
            theta = draw()
            got = np.asarray(got_fn(theta), dtype=float)
            ref = np.asarray(oracle_fn(theta), dtype=float)
            scale = max(1.0, float(np.max(np.abs(ref))))
            worst = max(worst, float(np.max(np.abs(got - ref))) / scale)
        checks.append({"check": name, "max_rel_error": worst, "passed": worst <= rel_tol})

    run_check(
        "forward_jacobian_vs_fd",
        lambda th: jacobian_forward(model, th),
        lambda th: ad.central_difference_jacobian(lambda x: evaluate_forward(model, x), th),
    )
    run_check(
        "forward_hessian_vs_fd",
        lambda th: hessian_forward(model, th),
        lambda th: np.stack(
            [
                ad.central_difference_jacobian(
                    lambda x: jacobian_forward(model, x)[i], th
                )
                for i in range(model.dim_y)
            ]
        ),
    )
    if not model.constant_noise:
        run_check(
            "noise_jacobian_vs_fd",
            lambda th: noise_jacobian(model, th),
            lambda th: ad.central_difference_jacobian(
                lambda x: np.array([noise_value(model, x)]), th
            )[0],
        )
    run_check(
        "grad_prior_theta_vs_fd",
        lambda th: grad_prior_theta(model, th),
        lambda th: ad.central_difference_jacobian(
            lambda x: np.array([prior_potential_theta(model, x)]), th
        )[0],
    )
    run_check(
        "grad_neg_log_posterior_vs_fd",
        lambda th: grad_neg_log_posterior(model, th),
        lambda th: ad.central_difference_jacobian(
            lambda x: np.array([neg_log_posterior(model, x)]), th
        )[0],
    )
    return checks
