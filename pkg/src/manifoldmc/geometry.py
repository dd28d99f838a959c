"""Geometry of the lifted posterior: constraint, Gram matrix and projections.

The extended state is ``q = (theta, eta)`` and the constraint function is
``C(theta, eta) = F(theta) + sigma(theta) * eta - y`` whose zero level set is
the support manifold of the lifted posterior.  The constraint Jacobian has
the block structure ``DC = [DF + eta Dsigma, sigma I]`` which every routine
here exploits: the Gram matrix ``G = DC DC'`` is ``A A' + sigma^2 I`` with
``A = DF + eta Dsigma``, so systems in ``G`` can be solved either densely or
through the Woodbury identity when the observation dimension dominates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from . import models as md
from .exceptions import NumericalError
from .models import ModelSpec

Array = np.ndarray


class GramFactor:
    """Factorization of ``G = A A' + s^2 I`` supporting solves and log-det.

    ``mode='dense'`` stores a Cholesky factor of the assembled ``d_y x d_y``
    matrix; ``mode='woodbury'`` factorizes the ``d_theta x d_theta`` inner
    matrix ``s^2 I + A' A`` instead, which is the cheaper route for
    overdetermined models (``d_y > d_theta``).
    """

    def __init__(self, a: Array, s: float, mode: str):
        self.a = a
        self.s = float(s)
        self.mode = mode
        self.d_y, self.d_theta = a.shape
        self._scalar = None
        if mode == "dense" and self.d_y == 1:
            # scalar fast path: the toy-scale models hit this in a tight loop
            g00 = float(a[0] @ a[0]) + self.s**2
            if not (np.isfinite(g00) and g00 > 0.0):
                raise NumericalError(f"scalar Gram entry not positive: {g00}")
            self._scalar = g00
            self._chol = np.array([[np.sqrt(g00)]])
            return
        try:
            if mode == "dense":
                g = a @ a.T + self.s**2 * np.eye(self.d_y)
                self._chol = np.linalg.cholesky(g)
            elif mode == "woodbury":
                k = self.s**2 * np.eye(self.d_theta) + a.T @ a
                self._chol = np.linalg.cholesky(k)
            else:
                raise ValueError(f"unknown gram mode {mode!r}")
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Gram Cholesky failed ({mode} path): {exc}") from exc

    @property
    def cholesky(self) -> Array:
        """Lower Cholesky factor of the matrix actually factorized."""
        return self._chol

    def solve(self, b: Array) -> Array:
        """Solve ``G x = b`` for a vector or matrix right-hand side."""
        if self._scalar is not None:
            return b / self._scalar
        if self.mode == "dense":
            return scipy.linalg.cho_solve((self._chol, True), b)
        inner = scipy.linalg.cho_solve((self._chol, True), self.a.T @ b)
        return (b - self.a @ inner) / self.s**2

    def logdet(self) -> float:
        if self._scalar is not None:
            return float(np.log(self._scalar))
        ld = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        if self.mode == "woodbury":
            ld += 2.0 * (self.d_y - self.d_theta) * np.log(self.s)
        return ld

    def trace_inv(self) -> float:
        """Trace of ``G^{-1}``, used by the log-det gradient."""
        if self._scalar is not None:
            return 1.0 / self._scalar
        if self.mode == "dense":
            inv_l = scipy.linalg.solve_triangular(
                self._chol, np.eye(self.d_y), lower=True
            )
            return float(np.sum(inv_l**2))
        inv_l = scipy.linalg.solve_triangular(
            self._chol, np.eye(self.d_theta), lower=True
        )
        trace_k_inv = float(np.sum(inv_l**2))
        return (self.d_y - self.d_theta + self.s**2 * trace_k_inv) / self.s**2

    def as_matrix(self) -> Array:
        return self.a @ self.a.T + self.s**2 * np.eye(self.d_y)


def cross_gram_solve(a_new: Array, s_new: float, a_ref: Array, s_ref: float, b: Array) -> Array:
    """Solve ``(A_new A_ref' + s_new s_ref I) x = b``.

    This is the matrix appearing in full-Newton position projections, built
    from the constraint Jacobians at the current iterate and at the step
    origin.  A push-through identity keeps the cost at the inner dimension
    when the models are overdetermined.
    """
    d_y, d_theta = a_new.shape
    c = s_new * s_ref
    if d_y == 1:
        return b / (float(a_new[0] @ a_ref[0]) + c)
    if d_y <= d_theta:
        m = a_new @ a_ref.T + c * np.eye(d_y)
        return np.linalg.solve(m, b)
    inner = np.linalg.solve(c * np.eye(d_theta) + a_ref.T @ a_new, a_ref.T @ b)
    return (b - a_new @ inner) / c


@dataclass
class ManifoldPoint:
    """Extended-space state with lazily filled geometric caches.

    Instances are created through :class:`LiftedGeometry` and must be treated
    as immutable once caches are populated; sharing them across chains is
    safe because every cache entry is a pure function of ``q``.
    """

    q: Array
    theta: Array
    eta: Array
    c: Optional[Array] = None
    a: Optional[Array] = None  # DF + eta Dsigma
    sigma: Optional[float] = None
    dsigma: Optional[Array] = None
    gram: Optional[GramFactor] = None
    pot: Optional[float] = None
    grad: Optional[Array] = None


@dataclass
class PhaseState:
    """A (position, momentum) pair on the cotangent bundle of the manifold."""

    q: ManifoldPoint
    p: Array


@dataclass(frozen=True)
class ProjectionResult:
    point: Optional[ManifoldPoint]
    failed: bool
    iters: int


def projection_loop(geo, q_tilde: Array, origin, tau: float, max_iter: int, update):
    """Shared position-projection skeleton over any lifted geometry.

    Iterates Lagrange multipliers along the origin's normal directions until
    the constraint residual drops below ``tau``.  ``update(point, residual)``
    returns the multiplier increment of the chosen solver.  Failure never
    raises: non-convergence, non-finite iterates, infeasible evaluations and
    residual blow-up all return ``failed=True`` and let the caller reject.
    """
    q_tilde = np.asarray(q_tilde, dtype=float)
    lam = None
    current = geo.point(q_tilde)
    try:
        guard = 1e3 * (1.0 + geo.constraint_norm(current))
    except Exception:
        return ProjectionResult(None, True, 0)
    for m in range(max_iter + 1):
        try:
            resid = geo.constraint(current)
        except Exception:
            return ProjectionResult(None, True, m)
        norm = float(np.max(np.abs(resid)))
        if not np.isfinite(norm) or norm > guard:
            return ProjectionResult(None, True, m)
        if norm < tau:
            return ProjectionResult(current, False, m)
        if m == max_iter:
            break
        try:
            step = update(current, resid)
        except (np.linalg.LinAlgError, NumericalError):
            return ProjectionResult(None, True, m)
        lam = step if lam is None else lam + step
        if not np.all(np.isfinite(lam)):
            return ProjectionResult(None, True, m)
        current = geo.point(q_tilde - geo.jac_t_dot(origin, lam))
    return ProjectionResult(None, True, max_iter)


class LiftedGeometry:
    """Operations on the lifted posterior of a :class:`ModelSpec`.

    Parameters
    ----------
    model:
        The observation model being lifted.
    tau:
        Position-projection convergence tolerance on ``max |C|``.
    max_iter:
        Iteration cap for the projection solvers; kept deliberately small so
        slowly converging proposals are abandoned cheaply.
    gram_mode:
        ``'auto'`` picks the dense path when ``d_y <= d_theta`` and the
        Woodbury path otherwise; ``'dense'``/``'woodbury'`` force a route.
    """

    def __init__(
        self,
        model: ModelSpec,
        tau: float = 1e-9,
        max_iter: int = 50,
        gram_mode: str = "auto",
    ):
        if tau <= 0 or max_iter < 1:
            raise ValueError("tau must be positive and max_iter >= 1")
        self.model = model
        self.tau = tau
        self.max_iter = max_iter
        self.dim_theta = model.dim_theta
        self.dim_y = model.dim_y
        self.dim_x = model.dim_theta + model.dim_y
        if gram_mode == "auto":
            gram_mode = "dense" if self.dim_y <= self.dim_theta else "woodbury"
        self.gram_mode = gram_mode
        # constant noise scales are by far the common case; resolve once
        self._const_sigma = None if callable(model.noise_scale) else float(
            model.noise_scale
        )
        if self._const_sigma is not None and self._const_sigma <= 0:
            raise ValueError("constant noise scale must be positive")

    # -- state construction ---------------------------------------------------

    def split(self, q: Array) -> tuple[Array, Array]:
        q = np.asarray(q, dtype=float)
        return q[: self.dim_theta], q[self.dim_theta :]

    def point(self, q: Array) -> ManifoldPoint:
        theta, eta = self.split(q)
        return ManifoldPoint(q=np.asarray(q, dtype=float), theta=theta, eta=eta)

    def point_from(self, theta: Array, eta: Array) -> ManifoldPoint:
        return self.point(np.concatenate([np.asarray(theta, float), np.asarray(eta, float)]))

    def lift(self, theta: Array) -> ManifoldPoint:
        """Map a latent point to its unique extended state on the manifold."""
        theta = np.asarray(theta, dtype=float)
        s = md.noise_value(self.model, theta)
        eta = (self.model.observed - md.evaluate_forward(self.model, theta)) / s
        return self.point_from(theta, eta)

    # -- constraint and Jacobian ----------------------------------------------

    def constraint(self, pt: ManifoldPoint) -> Array:
        if pt.c is None:
            s = self._sigma(pt)
            pt.c = md.evaluate_forward(self.model, pt.theta) + s * pt.eta - self.model.observed
        return pt.c

    def _sigma(self, pt: ManifoldPoint) -> float:
        if pt.sigma is None:
            pt.sigma = (
                self._const_sigma
                if self._const_sigma is not None
                else md.noise_value(self.model, pt.theta)
            )
        return pt.sigma

    def _dsigma(self, pt: ManifoldPoint) -> Array:
        if pt.dsigma is None:
            pt.dsigma = md.noise_jacobian(self.model, pt.theta)
        return pt.dsigma

    def theta_jacobian_block(self, pt: ManifoldPoint) -> Array:
        """The block ``A = DF + eta Dsigma`` of the constraint Jacobian."""
        if pt.a is None:
            a = md.jacobian_forward(self.model, pt.theta)
            if not self.model.constant_noise:
                a = a + np.outer(pt.eta, self._dsigma(pt))
            pt.a = a
        return pt.a

    def constraint_jacobian(self, pt: ManifoldPoint) -> Array:
        """Assembled ``DC = [A, sigma I]`` of shape ``(d_y, d_theta + d_y)``."""
        a = self.theta_jacobian_block(pt)
        return np.concatenate([a, self._sigma(pt) * np.eye(self.dim_y)], axis=1)

    def jac_dot(self, pt: ManifoldPoint, v: Array) -> Array:
        """``DC v`` without assembling ``DC``."""
        a = pt.a if pt.a is not None else self.theta_jacobian_block(pt)
        s = pt.sigma if pt.sigma is not None else self._sigma(pt)
        return a @ v[: self.dim_theta] + s * v[self.dim_theta :]

    def jac_t_dot(self, pt: ManifoldPoint, lam: Array) -> Array:
        """``DC' lam`` without assembling ``DC``."""
        a = pt.a if pt.a is not None else self.theta_jacobian_block(pt)
        s = pt.sigma if pt.sigma is not None else self._sigma(pt)
        return np.concatenate([a.T @ lam, s * lam])

    # -- Gram matrix and potential ---------------------------------------------

    def gram(self, pt: ManifoldPoint) -> GramFactor:
        if pt.gram is None:
            mode = self.gram_mode
            if mode == "auto":
                mode = "dense" if self.dim_y <= self.dim_theta else "woodbury"
            pt.gram = GramFactor(self.theta_jacobian_block(pt), self._sigma(pt), mode)
        return pt.gram

    def potential(self, pt: ManifoldPoint) -> float:
        """``Phi_theta + Phi_eta + 0.5 log det G``; well-defined off manifold."""
        if pt.pot is None:
            pt.pot = (
                md.prior_potential_theta(self.model, pt.theta)
                + md.prior_potential_eta(self.model, pt.eta)
                + 0.5 * self.gram(pt).logdet()
            )
        return pt.pot

    def grad_potential(self, pt: ManifoldPoint) -> Array:
        if pt.grad is None:
            gram = self.gram(pt)
            a = self.theta_jacobian_block(pt)
            w = gram.solve(a)  # G^{-1} A, shape (d_y, d_theta)
            d2f = md.hessian_forward(self.model, pt.theta)
            g_theta = md.grad_prior_theta(self.model, pt.theta)
            g_theta = g_theta + np.einsum("ic,ick->k", w, d2f)
            g_eta = md.grad_prior_eta(self.model, pt.eta)
            if not self.model.constant_noise:
                ds = self._dsigma(pt)
                h_sigma = md.noise_hessian(self.model, pt.theta)
                g_theta = g_theta + h_sigma @ (w.T @ pt.eta)
                g_theta = g_theta + self._sigma(pt) * gram.trace_inv() * ds
                g_eta = g_eta + w @ ds
            pt.grad = np.concatenate([g_theta, g_eta])
        return pt.grad

    def hamiltonian(self, pt: ManifoldPoint, p: Array) -> float:
        return self.potential(pt) + 0.5 * float(p @ p)

    # -- projections -------------------------------------------------------------

    def project_momentum(self, p: Array, pt: ManifoldPoint) -> Array:
        """Orthogonal projection of ``p`` onto the tangent space at ``pt``."""
        p = np.asarray(p, dtype=float)
        lam = self.gram(pt).solve(self.jac_dot(pt, p))
        return p - self.jac_t_dot(pt, lam)

    def tangency_error(self, pt: ManifoldPoint, p: Array) -> float:
        return float(np.max(np.abs(self.jac_dot(pt, p))))

    def constraint_norm(self, pt: ManifoldPoint) -> float:
        return float(np.max(np.abs(self.constraint(pt))))

    def project_position(
        self, q_tilde: Array, origin: ManifoldPoint, solver: str = "newton"
    ) -> ProjectionResult:
        if solver == "newton":
            return self.project_position_newton(q_tilde, origin, self.tau, self.max_iter)
        if solver == "symmetric_newton":
            return self.project_position_symmetric_newton(
                q_tilde, origin, self.tau, self.max_iter
            )
        raise ValueError(f"unknown position solver {solver!r}")

    def _projection_loop(
        self, q_tilde: Array, origin: ManifoldPoint, tau: float, max_iter: int, update
    ) -> ProjectionResult:
        return projection_loop(self, q_tilde, origin, tau, max_iter, update)

    def project_position_newton(
        self, q_tilde: Array, origin: ManifoldPoint, tau: float, max_iter: int
    ) -> ProjectionResult:
        """Full Newton solve of ``C(q_tilde - DC(origin)' lam) = 0``.

        Each iteration evaluates the constraint Jacobian at the current
        iterate and solves against the origin Jacobian's cross-Gram matrix.
        """
        a_ref = self.theta_jacobian_block(origin)
        s_ref = self._sigma(origin)

        def update(current, resid):
            a_new = self.theta_jacobian_block(current)
            return cross_gram_solve(a_new, self._sigma(current), a_ref, s_ref, resid)

        return self._projection_loop(q_tilde, origin, tau, max_iter, update)

    def project_position_symmetric_newton(
        self, q_tilde: Array, origin: ManifoldPoint, tau: float, max_iter: int
    ) -> ProjectionResult:
        """Quasi-Newton solve reusing the origin's Gram factorization.

        Cheaper per iteration than the full Newton update because neither a
        fresh Jacobian nor a fresh factorization is needed, at the price of
        slower (or failed) convergence when the Jacobian varies strongly.
        """
        gram = self.gram(origin)

        def update(current, resid):
            return gram.solve(resid)

        return self._projection_loop(q_tilde, origin, tau, max_iter, update)


# -- spec-level functional wrappers ------------------------------------------


def constraint(model: ModelSpec, theta: Array, eta: Array) -> Array:
    """``C(theta, eta) = F(theta) + sigma(theta) eta - y``."""
    geo = LiftedGeometry(model)
    return geo.constraint(geo.point_from(theta, eta))


def constraint_jacobian(model: ModelSpec, theta: Array, eta: Array) -> Array:
    geo = LiftedGeometry(model)
    return geo.constraint_jacobian(geo.point_from(theta, eta))
