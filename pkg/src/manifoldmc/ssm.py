"""Linear-time Gram algebra for Markovian state-space models.

For a state-space model with invertible observation maps the constraint can
be rewritten block-locally: each residual block compares the transition
applied to the reconstructed previous state against the reconstructed
current state, where states are recovered from data and noise variables.
The resulting constraint Jacobian has one dense tall column block (the
parameters), a block-diagonal part (innovations) and a block-bidiagonal part
(observation noises), so the Gram matrix splits into a block-tridiagonal
core plus a low-rank parameter correction.  Solves, log-determinants and the
selected band of the inverse all cost O(T).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .exceptions import DomainError, NumericalError

Array = np.ndarray


# -- structured Gram representation ---------------------------------------------


class BlockTridiagonalGram:
    """Symmetric Gram matrix ``Tri(diag, sub) + U U'``.

    ``diag`` has shape ``(T, d, d)``, ``sub`` shape ``(T-1, d, d)`` with
    ``sub[t]`` the block coupling ``t+1`` to ``t``, and ``U`` shape
    ``(T d, p)``.  Factorizations are computed lazily: a block (or banded,
    when ``d == 1``) Cholesky of the tridiagonal core and a dense Cholesky of
    the ``p x p`` Woodbury capacitance matrix.
    """

    def __init__(self, diag: Array, sub: Optional[Array], u: Optional[Array] = None):
        self.diag = np.asarray(diag, dtype=float)
        self.n_blocks, self.block_dim, _ = self.diag.shape
        if sub is None:
            sub = np.zeros((max(self.n_blocks - 1, 0), self.block_dim, self.block_dim))
        self.sub = np.asarray(sub, dtype=float)
        self.dim = self.n_blocks * self.block_dim
        self.u = (
            np.zeros((self.dim, 0)) if u is None else np.asarray(u, dtype=float)
        )
        self.rank = self.u.shape[1]
        self._core = None
        self._woodbury = None

    # -- core factorization -------------------------------------------------------

    def _factor_core(self):
        if self._core is not None:
            return self._core
        t, d = self.n_blocks, self.block_dim
        try:
            if d == 1:
                ab = np.zeros((2, t))
                ab[1] = self.diag[:, 0, 0]
                if t > 1:
                    ab[0, 1:] = self.sub[:, 0, 0]
                cb = scipy.linalg.cholesky_banded(ab)
                self._core = ("banded", cb)
            else:
                chol = np.empty((t, d, d))
                coupling = np.empty((max(t - 1, 0), d, d))
                chol[0] = np.linalg.cholesky(self.diag[0])
                for k in range(1, t):
                    e = scipy.linalg.solve_triangular(
                        chol[k - 1], self.sub[k - 1].T, lower=True
                    ).T
                    coupling[k - 1] = e
                    chol[k] = np.linalg.cholesky(self.diag[k] - e @ e.T)
                self._core = ("block", chol, coupling)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise NumericalError(f"block-tridiagonal Cholesky failed: {exc}") from exc
        return self._core

    def core_solve(self, b: Array) -> Array:
        """Solve the tridiagonal core against a vector or matrix."""
        core = self._factor_core()
        if core[0] == "banded":
            return scipy.linalg.cho_solve_banded((core[1], False), b)
        _, chol, coupling = core
        t, d = self.n_blocks, self.block_dim
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        work = b.reshape(t, d, -1).copy()
        for k in range(t):
            if k > 0:
                work[k] -= coupling[k - 1] @ work[k - 1]
            work[k] = scipy.linalg.solve_triangular(chol[k], work[k], lower=True)
        for k in range(t - 1, -1, -1):
            if k < t - 1:
                work[k] -= coupling[k].T @ work[k + 1]
            work[k] = scipy.linalg.solve_triangular(
                chol[k].T, work[k], lower=False
            )
        out = work.reshape(self.dim, -1)
        return out[:, 0] if vec else out

    def core_logdet(self) -> float:
        core = self._factor_core()
        if core[0] == "banded":
            return 2.0 * float(np.sum(np.log(core[1][-1])))
        chol = core[1]
        return 2.0 * float(np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2))))

    def core_band_inverse(self) -> tuple[Array, Array]:
        """Diagonal and first sub-diagonal blocks of the core's inverse.

        Backward selected-inversion recurrence from the Cholesky factor; cost
        O(T) and verified against dense inversion in the test suite.
        """
        t, d = self.n_blocks, self.block_dim
        core = self._factor_core()
        inv_diag = np.empty((t, d, d))
        inv_sub = np.empty((max(t - 1, 0), d, d))
        if core[0] == "banded":
            c = core[1][1]
            e = core[1][0][1:] if t > 1 else np.empty(0)
            inv_diag[t - 1, 0, 0] = 1.0 / c[t - 1] ** 2
            for k in range(t - 2, -1, -1):
                bk = e[k] / c[k]
                inv_sub[k, 0, 0] = -bk * inv_diag[k + 1, 0, 0]
                inv_diag[k, 0, 0] = 1.0 / c[k] ** 2 + bk**2 * inv_diag[k + 1, 0, 0]
            return inv_diag, inv_sub
        _, chol, coupling = core
        eye = np.eye(d)
        inv_last = scipy.linalg.solve_triangular(chol[t - 1], eye, lower=True)
        inv_diag[t - 1] = inv_last.T @ inv_last
        for k in range(t - 2, -1, -1):
            linv = scipy.linalg.solve_triangular(chol[k], eye, lower=True)
            bk = linv.T @ coupling[k].T  # L_k^{-T} E_{k+1}'
            inv_sub[k] = -(bk @ inv_diag[k + 1]).T
            inv_diag[k] = linv.T @ linv + bk @ inv_diag[k + 1] @ bk.T
        return inv_diag, inv_sub

    # -- Woodbury correction ---------------------------------------------------------

    def _factor_woodbury(self):
        if self._woodbury is None:
            if self.rank == 0:
                self._woodbury = (None, None)
            else:
                z = self.core_solve(self.u)
                k = np.eye(self.rank) + self.u.T @ z
                try:
                    chol_k = np.linalg.cholesky(k)
                except np.linalg.LinAlgError as exc:
                    raise NumericalError(f"Woodbury capacitance not PD: {exc}") from exc
                self._woodbury = (z, chol_k)
        return self._woodbury

    def solve(self, b: Array) -> Array:
        """Solve the full Gram system ``(Tri + U U') x = b``."""
        z, chol_k = self._factor_woodbury()
        pb = self.core_solve(b)
        if z is None:
            return pb
        return pb - z @ scipy.linalg.cho_solve((chol_k, True), self.u.T @ pb)

    def logdet(self) -> float:
        z, chol_k = self._factor_woodbury()
        ld = self.core_logdet()
        if chol_k is not None:
            ld += 2.0 * float(np.sum(np.log(np.diag(chol_k))))
        return ld

    def inv_u(self) -> Array:
        """``G^{-1} U``, a ``(T d, p)`` matrix, via the push-through identity."""
        z, chol_k = self._factor_woodbury()
        if z is None:
            return np.zeros((self.dim, 0))
        return scipy.linalg.cho_solve((chol_k, True), z.T).T

    def band_inverse(self) -> tuple[Array, Array]:
        """Diagonal and sub-diagonal blocks of the full inverse ``G^{-1}``."""
        inv_diag, inv_sub = self.core_band_inverse()
        z, chol_k = self._factor_woodbury()
        if z is not None:
            t, d = self.n_blocks, self.block_dim
            zk = scipy.linalg.cho_solve((chol_k, True), z.T).T.reshape(t, d, -1)
            zz = z.reshape(t, d, -1)
            inv_diag = inv_diag - np.einsum("tip,tjp->tij", zk, zz)
            if t > 1:
                inv_sub = inv_sub - np.einsum("tip,tjp->tij", zk[1:], zz[:-1])
        return inv_diag, inv_sub

    def as_dense(self) -> Array:
        t, d = self.n_blocks, self.block_dim
        out = np.zeros((self.dim, self.dim))
        for k in range(t):
            out[k * d : (k + 1) * d, k * d : (k + 1) * d] = self.diag[k]
        for k in range(t - 1):
            out[(k + 1) * d : (k + 2) * d, k * d : (k + 1) * d] = self.sub[k]
            out[k * d : (k + 1) * d, (k + 1) * d : (k + 2) * d] = self.sub[k].T
        return out + self.u @ self.u.T


def btd_solve(gram: BlockTridiagonalGram, b: Array) -> Array:
    """Solve ``G x = b`` for the structured Gram representation."""
    return gram.solve(b)


def btd_logdet(gram: BlockTridiagonalGram) -> float:
    """Log-determinant of the structured Gram matrix."""
    return gram.logdet()


# -- model spec ------------------------------------------------------------------


@dataclass
class BlockData:
    """Per-time-step residuals and first derivatives of the local constraint.

    ``u`` are the parameter columns, ``d_nu`` the innovation columns, ``a``
    the same-time noise columns and ``b`` the previous-time noise columns
    (``b[0]`` is zero: the first block has no predecessor).
    """

    resid: Array  # (T, d_y)
    u: Array  # (T, d_y, d_phi)
    d_nu: Array  # (T, d_y, d_x)
    a: Array  # (T, d_y, d_y)
    b: Array  # (T, d_y, d_y)


@dataclass(frozen=True)
class SsmSpec:
    """Markov-1 state-space model with invertible observation maps.

    ``block_residual(phi, nu_t, eta_prev, eta_t, t)`` evaluates one residual
    block and must be written with scalar arithmetic the AD duals support;
    ``eta_prev`` is ``None`` for the first block.  ``initial_eta`` recovers
    the unique noise sequence putting ``(phi, nu)`` on the manifold.  A
    ``vectorized`` provider may supply fast whole-sequence block derivatives;
    the generic AD path is used otherwise.
    """

    n_steps: int
    d_x: int
    d_y: int
    d_phi: int
    observed: Array  # (T, d_y)
    block_residual: Callable
    initial_eta: Callable
    prior_potential_phi: Callable
    grad_prior_phi: Callable
    prior_sample: Callable
    vectorized: Optional[object] = None
    name: str = "ssm"
    meta: dict = field(default_factory=dict)

    @property
    def local_dim(self) -> int:
        return self.d_phi + self.d_x + 2 * self.d_y

    @property
    def dim_theta(self) -> int:
        return self.d_phi + self.n_steps * self.d_x

    @property
    def dim_y(self) -> int:
        return self.n_steps * self.d_y


def _generic_blocks(spec: SsmSpec, phi: Array, nu: Array, eta: Array):
    """Reference block derivatives through the forward-mode engine."""
    t_steps, d_y, d_x, d_phi = spec.n_steps, spec.d_y, spec.d_x, spec.d_phi
    big_l = spec.local_dim
    nu2 = nu.reshape(t_steps, d_x)
    eta2 = eta.reshape(t_steps, d_y)
    resid = np.empty((t_steps, d_y))
    u = np.empty((t_steps, d_y, d_phi))
    d_nu = np.empty((t_steps, d_y, d_x))
    a = np.empty((t_steps, d_y, d_y))
    b = np.zeros((t_steps, d_y, d_y))
    hess = np.empty((t_steps, d_y, big_l, big_l))
    s_phi = slice(0, d_phi)
    s_nu = slice(d_phi, d_phi + d_x)
    s_prev = slice(d_phi + d_x, d_phi + d_x + d_y)
    s_cur = slice(d_phi + d_x + d_y, big_l)
    for t in range(t_steps):
        z = np.concatenate(
            [phi, nu2[t], eta2[t - 1] if t > 0 else np.zeros(d_y), eta2[t]]
        )

        def block(vars_z, t=t):
            phi_v = vars_z[s_phi]
            nu_v = vars_z[s_nu]
            prev_v = vars_z[s_prev] if t > 0 else None
            cur_v = vars_z[s_cur]
            return spec.block_residual(phi_v, nu_v, prev_v, cur_v, t)

        vals, jac, h = ad.value_jacobian_hessian(block, z)
        resid[t] = vals
        u[t] = jac[:, s_phi]
        d_nu[t] = jac[:, s_nu]
        if t > 0:
            b[t] = jac[:, s_prev]
        a[t] = jac[:, s_cur]
        hess[t] = h
    return BlockData(resid, u, d_nu, a, b), hess


def evaluate_blocks(spec: SsmSpec, phi: Array, nu: Array, eta: Array) -> BlockData:
    if spec.vectorized is not None:
        return spec.vectorized.blocks(phi, nu, eta)
    return _generic_blocks(spec, phi, nu, eta)[0]


def evaluate_block_hessians(spec: SsmSpec, phi: Array, nu: Array, eta: Array) -> Array:
    if spec.vectorized is not None:
        return spec.vectorized.hessians(phi, nu, eta)
    return _generic_blocks(spec, phi, nu, eta)[1]


def ssm_constraint(spec: SsmSpec, phi: Array, nu: Array, eta: Array) -> Array:
    """The block-local constraint residual, flattened to ``(T d_y,)``."""
    return evaluate_blocks(
        spec, np.asarray(phi, float), np.asarray(nu, float), np.asarray(eta, float)
    ).resid.ravel()


def build_structured_gram(
    spec: SsmSpec, phi: Array, nu: Array, eta: Array
) -> BlockTridiagonalGram:
    """Assemble the structured Gram of the constraint Jacobian at a point."""
    blocks = evaluate_blocks(
        spec, np.asarray(phi, float), np.asarray(nu, float), np.asarray(eta, float)
    )
    return gram_from_blocks(blocks)


def gram_from_blocks(blocks: BlockData) -> BlockTridiagonalGram:
    t_steps = blocks.resid.shape[0]
    diag = (
        np.einsum("tik,tjk->tij", blocks.d_nu, blocks.d_nu)
        + np.einsum("tik,tjk->tij", blocks.a, blocks.a)
        + np.einsum("tik,tjk->tij", blocks.b, blocks.b)
    )
    sub = (
        np.einsum("tik,tjk->tij", blocks.b[1:], blocks.a[:-1])
        if t_steps > 1
        else None
    )
    u = blocks.u.reshape(t_steps * blocks.u.shape[1], -1)
    return BlockTridiagonalGram(diag, sub, u)


def dense_jacobian_from_blocks(blocks: BlockData) -> Array:
    """Assemble the full constraint Jacobian densely (reference path)."""
    t_steps, d_y, d_phi = blocks.u.shape
    d_x = blocks.d_nu.shape[2]
    cols = d_phi + t_steps * d_x + t_steps * d_y
    jac = np.zeros((t_steps * d_y, cols))
    for t in range(t_steps):
        rows = slice(t * d_y, (t + 1) * d_y)
        jac[rows, :d_phi] = blocks.u[t]
        jac[rows, d_phi + t * d_x : d_phi + (t + 1) * d_x] = blocks.d_nu[t]
        off = d_phi + t_steps * d_x
        jac[rows, off + t * d_y : off + (t + 1) * d_y] = blocks.a[t]
        if t > 0:
            jac[rows, off + (t - 1) * d_y : off + t * d_y] = blocks.b[t]
    return jac


class _DenseGram:
    """Dense Gram factorization with the same interface the gradient needs."""

    def __init__(self, blocks: BlockData):
        self.blocks = blocks
        self.t_steps, self.d_y = blocks.resid.shape
        jac = dense_jacobian_from_blocks(blocks)
        self.jac = jac
        g = jac @ jac.T
        try:
            self._chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"dense SSM Gram Cholesky failed: {exc}") from exc

    def solve(self, b: Array) -> Array:
        return scipy.linalg.cho_solve((self._chol, True), b)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def band_inverse(self) -> tuple[Array, Array]:
        t, d = self.t_steps, self.d_y
        inv = self.solve(np.eye(t * d))
        blocks = inv.reshape(t, d, t, d)
        inv_diag = np.stack([blocks[k, :, k, :] for k in range(t)])
        inv_sub = (
            np.stack([blocks[k + 1, :, k, :] for k in range(t - 1)])
            if t > 1
            else np.empty((0, d, d))
        )
        return inv_diag, inv_sub

    def inv_u(self) -> Array:
        u = self.blocks.u.reshape(t_d := self.t_steps * self.d_y, -1)
        return self.solve(u) if u.shape[1] else np.zeros((t_d, 0))


# -- constrained geometry over an SSM ------------------------------------------


@dataclass
class SsmPoint:
    """Extended SSM state with lazy caches, mirroring ``ManifoldPoint``."""

    q: Array
    phi: Array
    nu: Array
    eta: Array
    blocks: Optional[BlockData] = None
    gram: Optional[object] = None
    c: Optional[Array] = None
    pot: Optional[float] = None
    grad: Optional[Array] = None

    @property
    def theta(self) -> Array:
        return self.q[: self.phi.shape[0] + self.nu.shape[0]]


class SsmGeometry:
    """Lifted-posterior geometry for a Markovian SSM.

    Implements the same surface as
    :class:`~manifoldmc.geometry.LiftedGeometry` so the constrained
    integrator and transition kernels work unchanged.  ``structured=True``
    routes all linear algebra through the block-tridiagonal representation;
    ``structured=False`` assembles dense matrices and serves as the oracle
    the structured path is tested against.
    """

    def __init__(
        self,
        spec: SsmSpec,
        tau: float = 1e-9,
        max_iter: int = 50,
        structured: bool = True,
    ):
        self.spec = spec
        self.tau = tau
        self.max_iter = max_iter
        self.structured = structured
        self.dim_theta = spec.dim_theta
        self.dim_y = spec.dim_y
        self.dim_x = self.dim_theta + self.dim_y
        self._s_phi = slice(0, spec.d_phi)
        self._s_nu = slice(spec.d_phi, self.dim_theta)
        self._s_eta = slice(self.dim_theta, self.dim_x)

    def prior_sample(self, rng: np.random.Generator) -> Array:
        return np.asarray(self.spec.prior_sample(rng), dtype=float)

    # -- states ---------------------------------------------------------------

    def point(self, q: Array) -> SsmPoint:
        q = np.asarray(q, dtype=float)
        return SsmPoint(
            q=q, phi=q[self._s_phi], nu=q[self._s_nu], eta=q[self._s_eta]
        )

    def lift(self, theta: Array) -> SsmPoint:
        theta = np.asarray(theta, dtype=float)
        phi, nu = theta[: self.spec.d_phi], theta[self.spec.d_phi :]
        eta = np.asarray(self.spec.initial_eta(phi, nu), dtype=float).ravel()
        return self.point(np.concatenate([theta, eta]))

    def _blocks(self, pt: SsmPoint) -> BlockData:
        if pt.blocks is None:
            pt.blocks = evaluate_blocks(self.spec, pt.phi, pt.nu, pt.eta)
        return pt.blocks

    def _gram(self, pt: SsmPoint):
        if pt.gram is None:
            blocks = self._blocks(pt)
            pt.gram = (
                gram_from_blocks(blocks) if self.structured else _DenseGram(blocks)
            )
        return pt.gram

    # -- constraint -------------------------------------------------------------

    def constraint(self, pt: SsmPoint) -> Array:
        if pt.c is None:
            pt.c = self._blocks(pt).resid.ravel()
        return pt.c

    def constraint_norm(self, pt: SsmPoint) -> float:
        return float(np.max(np.abs(self.constraint(pt))))

    def jac_dot(self, pt: SsmPoint, v: Array) -> Array:
        blocks = self._blocks(pt)
        t, d_y = blocks.resid.shape
        v_phi = v[self._s_phi]
        v_nu = v[self._s_nu].reshape(t, -1)
        v_eta = v[self._s_eta].reshape(t, d_y)
        out = (
            blocks.u @ v_phi
            + np.einsum("tij,tj->ti", blocks.d_nu, v_nu)
            + np.einsum("tij,tj->ti", blocks.a, v_eta)
        )
        out[1:] += np.einsum("tij,tj->ti", blocks.b[1:], v_eta[:-1])
        return out.ravel()

    def jac_t_dot(self, pt: SsmPoint, lam: Array) -> Array:
        blocks = self._blocks(pt)
        t, d_y = blocks.resid.shape
        lam2 = lam.reshape(t, d_y)
        g_phi = np.einsum("tij,ti->j", blocks.u, lam2)
        g_nu = np.einsum("tij,ti->tj", blocks.d_nu, lam2)
        g_eta = np.einsum("tij,ti->tj", blocks.a, lam2)
        g_eta[:-1] += np.einsum("tij,ti->tj", blocks.b[1:], lam2[1:])
        return np.concatenate([g_phi, g_nu.ravel(), g_eta.ravel()])

    # -- energies ------------------------------------------------------------------

    def potential(self, pt: SsmPoint) -> float:
        if pt.pot is None:
            try:
                half_logdet = 0.5 * self._gram(pt).logdet()
            except (DomainError, NumericalError):
                pt.pot = np.inf
                return pt.pot
            pt.pot = (
                float(self.spec.prior_potential_phi(pt.phi))
                + 0.5 * float(pt.nu @ pt.nu)
                + 0.5 * float(pt.eta @ pt.eta)
                + half_logdet
            )
        return pt.pot

    def grad_potential(self, pt: SsmPoint) -> Array:
        if pt.grad is None:
            spec = self.spec
            blocks = self._blocks(pt)
            gram = self._gram(pt)
            t, d_y = blocks.resid.shape
            d_phi, d_x = spec.d_phi, spec.d_x
            inv_diag, inv_sub = gram.band_inverse()
            w_phi = gram.inv_u().reshape(t, d_y, d_phi)
            w_nu = np.einsum("tik,tkj->tij", inv_diag, blocks.d_nu)
            w_cur = np.einsum("tik,tkj->tij", inv_diag, blocks.a)
            w_prev = np.zeros((t, d_y, d_y))
            if t > 1:
                w_cur[:-1] += np.einsum("tki,tkj->tij", inv_sub, blocks.b[1:])
                w_prev[1:] = np.einsum("tik,tkj->tij", inv_sub, blocks.a[:-1]) + (
                    np.einsum("tik,tkj->tij", inv_diag[1:], blocks.b[1:])
                )
            w_local = np.concatenate([w_phi, w_nu, w_prev, w_cur], axis=2)
            hess = evaluate_block_hessians(spec, pt.phi, pt.nu, pt.eta)
            g_local = np.einsum("tilc,tic->tl", hess, w_local)
            g_phi = self.spec.grad_prior_phi(pt.phi) + g_local[:, :d_phi].sum(axis=0)
            g_nu = pt.nu + g_local[:, d_phi : d_phi + d_x].ravel()
            g_eta = pt.eta.reshape(t, d_y) + g_local[:, d_phi + d_x + d_y :]
            g_eta[:-1] += g_local[1:, d_phi + d_x : d_phi + d_x + d_y]
            pt.grad = np.concatenate([g_phi, g_nu, g_eta.ravel()])
        return pt.grad

    def hamiltonian(self, pt: SsmPoint, p: Array) -> float:
        return self.potential(pt) + 0.5 * float(p @ p)

    # -- projections ------------------------------------------------------------------

    def project_momentum(self, p: Array, pt: SsmPoint) -> Array:
        lam = self._gram(pt).solve(self.jac_dot(pt, p))
        return p - self.jac_t_dot(pt, lam)

    def tangency_error(self, pt: SsmPoint, p: Array) -> float:
        return float(np.max(np.abs(self.jac_dot(pt, p))))

    def project_position(self, q_tilde: Array, origin: SsmPoint, solver: str = "newton"):
        from .geometry import projection_loop

        if solver == "symmetric_newton":
            gram = self._gram(origin)

            def update(current, resid):
                return gram.solve(resid)

        elif solver == "newton":
            ref_blocks = self._blocks(origin)

            def update(current, resid):
                return self._cross_solve(self._blocks(current), ref_blocks, resid)

        else:
            raise ValueError(f"unknown position solver {solver!r}")
        return projection_loop(self, q_tilde, origin, self.tau, self.max_iter, update)

    def _cross_solve(self, new: BlockData, ref: BlockData, resid: Array) -> Array:
        """Solve ``DC(new) DC(ref)' x = resid`` preserving the band structure.

        The cross product keeps the tridiagonal-plus-low-rank form but loses
        symmetry, so the scalar-block path goes through a general banded LU
        with a push-through low-rank correction; wider blocks fall back to a
        dense solve.
        """
        t, d_y = new.resid.shape
        if self.structured and d_y == 1 and t > 2:
            diag = (
                (new.d_nu[:, 0, :] * ref.d_nu[:, 0, :]).sum(axis=1)
                + new.a[:, 0, 0] * ref.a[:, 0, 0]
                + new.b[:, 0, 0] * ref.b[:, 0, 0]
            )
            lower = new.b[1:, 0, 0] * ref.a[:-1, 0, 0]
            upper = new.a[:-1, 0, 0] * ref.b[1:, 0, 0]
            ab = np.zeros((3, t))
            ab[0, 1:] = upper
            ab[1] = diag
            ab[2, :-1] = lower

            def core(rhs):
                return scipy.linalg.solve_banded((1, 1), ab, rhs)

            u_new = new.u.reshape(t, -1)
            u_ref = ref.u.reshape(t, -1)
            if u_new.shape[1] == 0:
                return core(resid)
            pr = core(resid)
            pu = core(u_new)
            cap = np.eye(u_new.shape[1]) + u_ref.T @ pu
            return pr - pu @ np.linalg.solve(cap, u_ref.T @ pr)
        m = dense_jacobian_from_blocks(new) @ dense_jacobian_from_blocks(ref).T
        return np.linalg.solve(m, resid)
