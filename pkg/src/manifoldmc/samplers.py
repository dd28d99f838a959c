"""MCMC transition kernels and the chain driver.

The constrained HMC transition integrates the lifted dynamics with per-step
reversibility checks: every forward integrator step is re-run with a negated
step size and the whole trajectory is rejected unless the original state is
recovered within a tolerance, so projection-solver failures and multivalued
projections can never bias the chain.  Baseline kernels (random walk, MALA,
HMC with a fixed metric and the position-dependent proposal variants) share
the same bookkeeping so acceptance statistics are directly comparable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import models as md
from .geometry import LiftedGeometry, ManifoldPoint
from .integrators import constrained_step
from .models import ModelSpec

Array = np.ndarray

REJECT_REASONS = ("metropolis", "nonreversible", "solver_failed", "divergent")


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ChmcConfig:
    """Settings for the constrained HMC kernel."""

    eps: float = 0.5
    n_steps: int = 10
    tau: float = 1e-9
    max_iter: int = 50
    rho: float = 2e-8
    solver: str = "newton"
    target_accept: float = 0.9
    jitter_steps: bool = False
    check_momentum_reversal: bool = False

    def __post_init__(self):
        if self.eps <= 0 or self.n_steps < 1 or self.rho <= 0:
            raise ValueError("eps and rho must be positive, n_steps >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass(frozen=True)
class TransitionStats:
    accept_prob: float
    accepted: bool
    reason: Optional[str]  # None when accepted, else one of REJECT_REASONS
    delta_h: float
    newton_iters: int = 0


def _metropolis_outcome(delta_h: float, rng: np.random.Generator):
    """Shared acceptance bookkeeping given an energy difference."""
    if not np.isfinite(delta_h):
        return False, 0.0, "divergent"
    accept_prob = min(1.0, math.exp(min(0.0, -delta_h)))
    accepted = math.log(rng.uniform()) < -delta_h
    return accepted, accept_prob, (None if accepted else "metropolis")


# -- constrained HMC -------------------------------------------------------------


def chmc_transition(
    geo, pt: ManifoldPoint, cfg: ChmcConfig, rng: np.random.Generator
) -> tuple[ManifoldPoint, TransitionStats]:
    """One constrained HMC transition from an on-manifold state.

    Samples a fresh Gaussian momentum, projects it onto the tangent space,
    then alternates forward integrator steps with reversed ones; any solver
    failure or reversal discrepancy above ``cfg.rho`` rejects the whole
    trajectory.  Ends with a Metropolis test on the Hamiltonian difference.
    The current state is returned unchanged on every rejection path.
    """
    p_tilde = rng.standard_normal(geo.dim_x)
    p0 = geo.project_momentum(p_tilde, pt)
    h0 = geo.hamiltonian(pt, p0)
    n_steps = int(rng.integers(1, cfg.n_steps + 1)) if cfg.jitter_steps else cfg.n_steps

    q_prev, p_prev = pt, p0
    total_iters = 0
    for _ in range(n_steps):
        fwd = constrained_step(geo, q_prev, p_prev, cfg.eps, cfg.solver)
        total_iters += fwd.newton_iters
        if not fwd.failed:
            rev = constrained_step(geo, fwd.q1, fwd.p1, -cfg.eps, cfg.solver)
            total_iters += rev.newton_iters
        if fwd.failed or rev.failed:
            return pt, TransitionStats(0.0, False, "solver_failed", math.nan, total_iters)
        if float(np.max(np.abs(rev.q1.q - q_prev.q))) >= cfg.rho:
            return pt, TransitionStats(0.0, False, "nonreversible", math.nan, total_iters)
        if cfg.check_momentum_reversal and float(
            np.max(np.abs(rev.p1 - p_prev))
        ) >= cfg.rho:
            return pt, TransitionStats(0.0, False, "nonreversible", math.nan, total_iters)
        q_prev, p_prev = fwd.q1, fwd.p1

    delta_h = geo.hamiltonian(q_prev, p_prev) - h0
    accepted, accept_prob, reason = _metropolis_outcome(delta_h, rng)
    stats = TransitionStats(accept_prob, accepted, reason, delta_h, total_iters)
    return (q_prev if accepted else pt), stats


# -- mass metrics for unconstrained HMC ------------------------------------------


class Metric:
    """Mass metric specified through the inverse mass (a covariance estimate).

    ``inverse_mass`` may be ``None`` (identity), a 1-D array (diagonal) or a
    2-D array (dense).  Momenta are drawn from ``Normal(0, M)`` with
    ``M = inverse_mass^{-1}``, matching the convention that the inverse mass
    approximates the posterior covariance.
    """

    def __init__(self, dim: int, inverse_mass=None):
        self.dim = dim
        if inverse_mass is None:
            self.kind = "identity"
            self.inverse_mass = None
        else:
            arr = np.asarray(inverse_mass, dtype=float)
            if arr.ndim == 1:
                self.kind = "diagonal"
                self.inverse_mass = arr
                self._sqrt_inv = np.sqrt(arr)
            elif arr.ndim == 2:
                self.kind = "dense"
                self.inverse_mass = arr
                self._chol = np.linalg.cholesky(arr)
            else:
                raise ValueError("inverse_mass must be 1-D or 2-D")

    def sample_momentum(self, rng: np.random.Generator) -> Array:
        z = rng.standard_normal(self.dim)
        if self.kind == "identity":
            return z
        if self.kind == "diagonal":
            return z / self._sqrt_inv
        import scipy.linalg

        return scipy.linalg.solve_triangular(self._chol.T, z, lower=False)

    def kinetic(self, p: Array) -> float:
        return 0.5 * float(p @ self.apply_inverse(p))

    def apply_inverse(self, p: Array) -> Array:
        if self.kind == "identity":
            return p
        if self.kind == "diagonal":
            return self.inverse_mass * p
        return self.inverse_mass @ p


class UnconstrainedTarget:
    """Negative log posterior of a model, as seen by latent-space samplers."""

    def __init__(self, model: ModelSpec):
        self.model = model
        self.dim = model.dim_theta

    def potential(self, theta: Array) -> float:
        try:
            return md.neg_log_posterior(self.model, theta)
        except Exception:
            return math.inf

    def grad(self, theta: Array) -> Array:
        return md.grad_neg_log_posterior(self.model, theta)


# -- baseline kernels -------------------------------------------------------------


def hmc_transition(
    target,
    theta: Array,
    eps: float,
    n_steps: int,
    metric: Metric,
    rng: np.random.Generator,
    divergence_threshold: float = 1000.0,
) -> tuple[Array, TransitionStats]:
    """Standard HMC with a fixed mass metric and leapfrog integration."""
    p = metric.sample_momentum(rng)
    u0 = target.potential(theta)
    h0 = u0 + metric.kinetic(p)
    q = np.array(theta, dtype=float)
    try:
        grad = target.grad(q)
        for _ in range(n_steps):
            p = p - 0.5 * eps * grad
            q = q + eps * metric.apply_inverse(p)
            grad = target.grad(q)
            p = p - 0.5 * eps * grad
    except Exception:
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    delta_h = target.potential(q) + metric.kinetic(p) - h0
    if not np.isfinite(delta_h) or abs(delta_h) > divergence_threshold:
        return theta, TransitionStats(0.0, False, "divergent", delta_h)
    accepted, accept_prob, reason = _metropolis_outcome(delta_h, rng)
    stats = TransitionStats(accept_prob, accepted, reason, delta_h)
    return (q if accepted else theta), stats


def _psd_sqrt(cov: Array) -> Array:
    """Lower-triangular-ish square root tolerating semidefinite input."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def rwm_transition(
    target,
    theta: Array,
    eps: float,
    rng: np.random.Generator,
    cov: Optional[Array] = None,
) -> tuple[Array, TransitionStats]:
    """Random-walk Metropolis with (optionally preconditioned) Gaussian steps."""
    theta = np.asarray(theta, dtype=float)
    z = rng.standard_normal(theta.shape[0])
    step = z if cov is None else _psd_sqrt(np.asarray(cov, dtype=float)) @ z
    proposal = theta + eps * step
    delta = target.potential(proposal) - target.potential(theta)
    accepted, accept_prob, reason = _metropolis_outcome(delta, rng)
    stats = TransitionStats(accept_prob, accepted, reason, delta)
    return (proposal if accepted else theta), stats


def mala_transition(
    target, theta: Array, eps: float, rng: np.random.Generator
) -> tuple[Array, TransitionStats]:
    """Metropolis-adjusted Langevin: drifted Gaussian proposal, full MH ratio."""
    theta = np.asarray(theta, dtype=float)
    grad0 = target.grad(theta)
    mean_fwd = theta - 0.5 * eps**2 * grad0
    proposal = mean_fwd + eps * rng.standard_normal(theta.shape[0])
    try:
        grad1 = target.grad(proposal)
    except Exception:
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    mean_rev = proposal - 0.5 * eps**2 * grad1
    log_q_fwd = -0.5 * float(np.sum((proposal - mean_fwd) ** 2)) / eps**2
    log_q_rev = -0.5 * float(np.sum((theta - mean_rev) ** 2)) / eps**2
    delta = (
        target.potential(proposal) - target.potential(theta) + log_q_fwd - log_q_rev
    )
    accepted, accept_prob, reason = _metropolis_outcome(delta, rng)
    stats = TransitionStats(accept_prob, accepted, reason, delta)
    return (proposal if accepted else theta), stats


def _metric_grad_fd(metric_fn: Callable, theta: Array) -> Array:
    """Central-difference tensor ``d M[i,j] / d theta[k]`` indexed ``[i,j,k]``."""
    from . import autodiff as ad

    d = theta.shape[0]
    m0 = np.asarray(metric_fn(theta), dtype=float)
    out = np.empty((m0.shape[0], m0.shape[1], d))
    for k in range(d):
        h = ad.fd_step(theta[k])
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        out[:, :, k] = (
            np.asarray(metric_fn(tp), dtype=float) - np.asarray(metric_fn(tm), dtype=float)
        ) / (2.0 * h)
    return out


def _gaussian_log_density(x: Array, mean: Array, chol_metric: Array, eps: float) -> float:
    """Log density of ``Normal(mean, eps^2 M^{-1})`` given ``chol(M)``."""
    diff = x - mean
    w = chol_metric.T @ diff  # |w|^2 = diff' M diff
    logdet_m = 2.0 * float(np.sum(np.log(np.diag(chol_metric))))
    d = x.shape[0]
    return 0.5 * logdet_m - d * math.log(eps) - 0.5 * float(w @ w) / eps**2


def position_dependent_mala_transition(
    target,
    theta: Array,
    eps: float,
    metric_fn: Callable,
    rng: np.random.Generator,
    variant: str = "simple",
    metric_grad_fn: Optional[Callable] = None,
) -> tuple[Array, TransitionStats]:
    """Langevin proposal preconditioned by a position-dependent metric.

    ``variant='simple'`` drops the metric-derivative drift correction;
    ``variant='corrected'`` adds the term built from ``d M / d theta``
    contracted against ``M^{-1}``.  Both use the full Metropolis-Hastings
    ratio with the position-dependent proposal density on each side, so both
    leave the target invariant regardless of the drift's fidelity.
    """
    if variant not in ("simple", "corrected"):
        raise ValueError(f"unknown variant {variant!r}")
    theta = np.asarray(theta, dtype=float)
    import scipy.linalg

    def drifted_mean_and_chol(point):
        m = np.asarray(metric_fn(point), dtype=float)
        chol = np.linalg.cholesky(m)
        drift = target.grad(point).copy()
        if variant == "corrected":
            dm = (
                metric_grad_fn(point)
                if metric_grad_fn is not None
                else _metric_grad_fd(metric_fn, point)
            )
            m_inv = scipy.linalg.cho_solve((chol, True), np.eye(m.shape[0]))
            drift = drift + np.einsum("ijk,jk->i", dm, m_inv)
        mean = point - 0.5 * eps**2 * scipy.linalg.cho_solve((chol, True), drift)
        return mean, chol

    try:
        mean_fwd, chol0 = drifted_mean_and_chol(theta)
    except np.linalg.LinAlgError:
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    z = rng.standard_normal(theta.shape[0])
    proposal = mean_fwd + eps * scipy.linalg.solve_triangular(chol0.T, z, lower=False)
    try:
        mean_rev, chol1 = drifted_mean_and_chol(proposal)
    except (np.linalg.LinAlgError, ValueError):
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    delta = (
        target.potential(proposal)
        - target.potential(theta)
        + _gaussian_log_density(proposal, mean_fwd, chol0, eps)
        - _gaussian_log_density(theta, mean_rev, chol1, eps)
    )
    accepted, accept_prob, reason = _metropolis_outcome(delta, rng)
    stats = TransitionStats(accept_prob, accepted, reason, delta)
    return (proposal if accepted else theta), stats


def position_dependent_rwm_transition(
    target,
    theta: Array,
    eps: float,
    metric_fn: Callable,
    rng: np.random.Generator,
) -> tuple[Array, TransitionStats]:
    """Random walk with position-dependent proposal covariance ``eps^2 M^{-1}``."""
    theta = np.asarray(theta, dtype=float)
    import scipy.linalg

    try:
        chol0 = np.linalg.cholesky(np.asarray(metric_fn(theta), dtype=float))
    except np.linalg.LinAlgError:
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    z = rng.standard_normal(theta.shape[0])
    proposal = theta + eps * scipy.linalg.solve_triangular(chol0.T, z, lower=False)
    try:
        chol1 = np.linalg.cholesky(np.asarray(metric_fn(proposal), dtype=float))
    except np.linalg.LinAlgError:
        return theta, TransitionStats(0.0, False, "divergent", math.nan)
    delta = (
        target.potential(proposal)
        - target.potential(theta)
        + _gaussian_log_density(proposal, theta, chol0, eps)
        - _gaussian_log_density(theta, proposal, chol1, eps)
    )
    accepted, accept_prob, reason = _metropolis_outcome(delta, rng)
    stats = TransitionStats(accept_prob, accepted, reason, delta)
    return (proposal if accepted else theta), stats


# -- step-size adaptation -----------------------------------------------------


@dataclass(frozen=True)
class DualAveragingState:
    """State of the dual-averaging step-size controller."""

    mu: float
    log_eps: float
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    iteration: int = 0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    target_accept: float = 0.9

    @classmethod
    def initialize(cls, eps0: float, target_accept: float = 0.9) -> "DualAveragingState":
        return cls(
            mu=math.log(10.0 * eps0),
            log_eps=math.log(eps0),
            target_accept=target_accept,
        )

    @property
    def eps(self) -> float:
        """Step size to use while adaptation is running."""
        return math.exp(self.log_eps)

    @property
    def eps_frozen(self) -> float:
        """Averaged step size to freeze for the sampling phase."""
        return math.exp(self.log_eps_bar)


def adapt_step_size(state: DualAveragingState, accept_prob: float) -> DualAveragingState:
    """One dual-averaging update driving acceptance toward the target rate."""
    m = state.iteration + 1
    w = 1.0 / (m + state.t0)
    h_bar = (1.0 - w) * state.h_bar + w * (state.target_accept - accept_prob)
    log_eps = state.mu - math.sqrt(m) / state.gamma * h_bar
    mw = m**-state.kappa
    log_eps_bar = mw * log_eps + (1.0 - mw) * state.log_eps_bar
    return replace(
        state, h_bar=h_bar, log_eps=log_eps, log_eps_bar=log_eps_bar, iteration=m
    )


def find_reasonable_epsilon(
    accept_prob_of_eps: Callable[[float], float],
    eps0: float = 1.0,
    max_steps: int = 40,
) -> float:
    """Double or halve a trial step size until acceptance crosses one half."""
    eps = eps0
    alpha = max(accept_prob_of_eps(eps), 1e-12)
    direction = 1.0 if alpha > 0.5 else -1.0
    for _ in range(max_steps):
        if direction > 0 and alpha <= 0.5:
            break
        if direction < 0 and alpha >= 0.5:
            break
        eps *= 2.0**direction
        if not 1e-10 < eps < 1e6:
            break
        alpha = max(accept_prob_of_eps(eps), 1e-12)
    return eps


def adapt_metric(draws: Array, kind: str = "diagonal", reg: float = 1e-3) -> Metric:
    """Metric from warm-up draws: regularized variance or covariance.

    The estimate is shrunk toward the identity, ``S n/(n+5) + reg 5/(n+5) I``,
    so short windows cannot produce degenerate metrics.
    """
    draws = np.asarray(draws, dtype=float)
    n, dim = draws.shape
    shrink = n / (n + 5.0)
    ridge = reg * 5.0 / (n + 5.0)
    if kind == "diagonal":
        var = draws.var(axis=0, ddof=1) if n > 1 else np.zeros(dim)
        return Metric(dim, shrink * var + ridge)
    if kind == "dense":
        cov = np.cov(draws.T, ddof=1) if n > 1 else np.zeros((dim, dim))
        cov = np.atleast_2d(cov)
        return Metric(dim, shrink * cov + ridge * np.eye(dim))
    if kind == "identity":
        return Metric(dim)
    raise ValueError(f"unknown metric kind {kind!r}")


def metric_window_ends(
    n_warmup: int, init_buffer: int = 75, term_buffer: int = 50, base_window: int = 25
) -> list[int]:
    """Iteration indices at which the metric is re-estimated (Stan-style).

    Memoryless doubling windows between an initial fast interval and a final
    step-size-only buffer; the last window absorbs any remainder.  Buffers
    shrink proportionally when the warm-up phase is short.
    """
    if n_warmup < init_buffer + term_buffer + base_window:
        init_buffer = max(1, int(0.15 * n_warmup))
        term_buffer = max(1, int(0.10 * n_warmup))
        base_window = max(1, n_warmup - init_buffer - term_buffer)
    ends = []
    start = init_buffer
    window = base_window
    while start + window <= n_warmup - term_buffer:
        end = start + window
        if end + 2 * window > n_warmup - term_buffer:
            end = n_warmup - term_buffer
        ends.append(end)
        start = end
        window *= 2
    return ends


# -- chain driver ----------------------------------------------------------------


@dataclass
class ChainTrace:
    """Per-iteration record of one chain's main sampling phase."""

    thetas: Array
    accept_probs: Array
    accepted: Array
    reasons: list
    delta_h: Array
    newton_iters: Array
    sampler: str
    seed: int
    adapted_eps: float
    n_warmup: int
    warmup_seconds: float = 0.0
    main_seconds: float = 0.0
    warmup_accept_mean: float = math.nan

    @property
    def mean_accept(self) -> float:
        return float(np.mean(self.accept_probs)) if len(self.accept_probs) else math.nan

    def reason_counts(self) -> dict:
        counts = {r: 0 for r in REJECT_REASONS}
        for r in self.reasons:
            if r is not None:
                counts[r] += 1
        return counts


def _chain_rng(seed: int) -> np.random.Generator:
    """Counter-based stream so chains are independent and reproducible."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def run_chain(
    model: Optional[ModelSpec],
    sampler: str,
    *,
    seed: int,
    n_warmup: int,
    n_main: int,
    chmc: Optional[ChmcConfig] = None,
    eps: Optional[float] = None,
    n_leapfrog: int = 10,
    metric_kind: str = "identity",
    metric_fn: Optional[Callable] = None,
    metric_grad_fn: Optional[Callable] = None,
    variant: str = "simple",
    adapt: Optional[bool] = None,
    target_accept: float = 0.9,
    init_step_search: bool = True,
    geometry=None,
    target=None,
    init_theta: Optional[Array] = None,
    store_latent: bool = True,
) -> ChainTrace:
    """Run one chain: adaptive warm-up followed by a fixed-parameter main phase.

    ``sampler`` is one of ``chmc``, ``hmc``, ``rwm``, ``mala``, ``pd_rwm``,
    ``pd_mala_simple``, ``pd_mala_corrected``.  For ``chmc`` the initial
    latent point is mapped to its unique extended state on the manifold.
    Custom problems can supply a prebuilt ``geometry`` (constrained case) or
    ``target`` (latent-space case); otherwise both are built from ``model``.
    A given ``(seed, configuration)`` pair reproduces its trace bit for bit.
    """
    rng = _chain_rng(seed)
    if adapt is None:
        adapt = n_warmup > 0

    if init_theta is not None:
        theta0 = np.asarray(init_theta, dtype=float)
    else:
        sample_fn = (
            getattr(geometry, "prior_sample", None)
            or getattr(target, "prior_sample", None)
            or (model.prior_sample if model is not None else None)
        )
        if sample_fn is None:
            raise ValueError("no initial point: provide init_theta or a prior sampler")
        theta0 = np.asarray(sample_fn(rng), dtype=float)

    if sampler == "chmc":
        geo = geometry if geometry is not None else LiftedGeometry(
            model, tau=(chmc or ChmcConfig()).tau, max_iter=(chmc or ChmcConfig()).max_iter
        )
        cfg = chmc or ChmcConfig(eps=eps or 0.5)
        if eps is not None:
            cfg = replace(cfg, eps=eps)
        state = geo.lift(theta0)

        def kernel(state, step, rng):
            return chmc_transition(geo, state, replace(cfg, eps=step), rng)

        def extract(state):
            return np.array(state.theta, dtype=float)

        eps0 = cfg.eps
        tgt_accept = cfg.target_accept
        metric_adapted = False
    else:
        tgt = target if target is not None else UnconstrainedTarget(model)
        state = theta0
        eps0 = eps if eps is not None else 0.1
        tgt_accept = target_accept
        metric_adapted = sampler == "hmc" and metric_kind in ("diagonal", "dense")
        metric_holder = {"metric": Metric(theta0.shape[0])}
        if sampler == "hmc":

            def kernel(state, step, rng):
                return hmc_transition(
                    tgt, state, step, n_leapfrog, metric_holder["metric"], rng
                )

        elif sampler == "rwm":

            def kernel(state, step, rng):
                return rwm_transition(tgt, state, step, rng)

        elif sampler == "mala":

            def kernel(state, step, rng):
                return mala_transition(tgt, state, step, rng)

        elif sampler == "pd_rwm":
            mfn = metric_fn or (lambda th: md.fisher_metric(model, th))

            def kernel(state, step, rng):
                return position_dependent_rwm_transition(tgt, state, step, mfn, rng)

        elif sampler in ("pd_mala_simple", "pd_mala_corrected"):
            mfn = metric_fn or (lambda th: md.fisher_metric(model, th))
            mgrad = metric_grad_fn
            if mgrad is None and metric_fn is None and model.constant_noise:
                mgrad = lambda th: md.fisher_metric_grad(model, th)
            var = "simple" if sampler.endswith("simple") else "corrected"

            def kernel(state, step, rng):
                return position_dependent_mala_transition(
                    tgt, state, step, mfn, rng, variant=var, metric_grad_fn=mgrad
                )

        else:
            raise ValueError(f"unknown sampler {sampler!r}")

        def extract(state):
            return np.array(state, dtype=float)

    # -- warm-up -----------------------------------------------------------------
    t_start = time.perf_counter()
    warmup_accepts = []
    if adapt and n_warmup > 0:
        if init_step_search:
            # doubling/halving search for a starting step size whose trial
            # acceptance crosses one half; trial draws use a side stream so
            # the chain's own stream is untouched
            def trial_accept(eps_try: float) -> float:
                trial_rng = _chain_rng((seed * 1_000_003 + 0xE95) % 2**63)
                _, trial_stats = kernel(state, eps_try, trial_rng)
                return trial_stats.accept_prob

            eps0 = find_reasonable_epsilon(trial_accept, eps0)
        da = DualAveragingState.initialize(eps0, tgt_accept)
        window_ends = (
            metric_window_ends(n_warmup) if metric_adapted else []
        )
        window_draws: list[Array] = []
        for i in range(1, n_warmup + 1):
            state, stats = kernel(state, da.eps, rng)
            warmup_accepts.append(stats.accept_prob)
            da = adapt_step_size(da, stats.accept_prob)
            if metric_adapted:
                window_draws.append(extract(state))
                if i in window_ends:
                    metric_holder["metric"] = adapt_metric(
                        np.asarray(window_draws), metric_kind
                    )
                    window_draws = []
                    da = DualAveragingState.initialize(max(da.eps, 1e-10), tgt_accept)
        step_size = da.eps_frozen
    else:
        for _ in range(n_warmup):
            state, stats = kernel(state, eps0, rng)
            warmup_accepts.append(stats.accept_prob)
        step_size = eps0
    warmup_seconds = time.perf_counter() - t_start

    # -- main phase ----------------------------------------------------------------
    dim = extract(state).shape[0]
    thetas = np.empty((n_main, dim)) if store_latent else np.empty((0, dim))
    accept_probs = np.empty(n_main)
    accepted = np.zeros(n_main, dtype=bool)
    reasons: list = [None] * n_main
    delta_h = np.empty(n_main)
    newton_iters = np.zeros(n_main, dtype=int)
    t_main = time.perf_counter()
    for i in range(n_main):
        state, stats = kernel(state, step_size, rng)
        if store_latent:
            thetas[i] = extract(state)
        accept_probs[i] = stats.accept_prob
        accepted[i] = stats.accepted
        reasons[i] = stats.reason
        delta_h[i] = stats.delta_h
        newton_iters[i] = stats.newton_iters
    main_seconds = time.perf_counter() - t_main

    return ChainTrace(
        thetas=thetas,
        accept_probs=accept_probs,
        accepted=accepted,
        reasons=reasons,
        delta_h=delta_h,
        newton_iters=newton_iters,
        sampler=sampler,
        seed=seed,
        adapted_eps=step_size,
        n_warmup=n_warmup,
        warmup_seconds=warmup_seconds,
        main_seconds=main_seconds,
        warmup_accept_mean=float(np.mean(warmup_accepts)) if warmup_accepts else math.nan,
    )
