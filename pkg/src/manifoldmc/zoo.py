"""Example models: quartic-loop toy, linear-Gaussian, FitzHugh-Nagumo, AR(1) SSM.

Each constructor returns a fully wired :class:`~manifoldmc.models.ModelSpec`
with analytic derivatives.  Helpers for the experiment harness (manifold
start points, analytic posteriors, reference dynamics) live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as md
from .models import ModelSpec

Array = np.ndarray


# -- quartic loop toy model ----------------------------------------------------


def toy_loop_model(sigma: float) -> ModelSpec:
    """Two-parameter model whose limiting manifold is a closed quartic loop.

    ``F(theta) = theta_1^2 + theta_0^2 (theta_0^2 - 1/2)`` with observation
    ``y = 1`` and a standard centred Gaussian prior on ``theta``.
    """

    def forward(theta):
        t0, t1 = theta[0], theta[1]
        return [t1 * t1 + t0 * t0 * (t0 * t0 - 0.5)]

    def jac(theta):
        t0, t1 = theta
        return np.array([[4.0 * t0**3 - t0, 2.0 * t1]])

    def hess(theta):
        t0 = theta[0]
        return np.array([[[12.0 * t0**2 - 1.0, 0.0], [0.0, 2.0]]])

    return ModelSpec(
        dim_theta=2,
        dim_y=1,
        observed=np.array([1.0]),
        forward=forward,
        noise_scale=float(sigma),
        prior_potential_theta=lambda th: 0.5 * float(np.dot(th, th)),
        jacobian=jac,
        forward_hessian=hess,
        grad_prior_theta=lambda th: np.asarray(th, dtype=float),
        prior_sample=lambda rng: rng.standard_normal(2),
        name="toy_loop",
        meta={"sigma": float(sigma)},
    )


def loop_radius(angle: Array, level: float = 1.0) -> Array:
    """Radius at which the ray with the given angle crosses ``F(theta) = level``.

    Substituting polar coordinates into the quartic gives a quadratic in
    ``r^2`` with exactly one positive root, so the crossing is unique.
    """
    angle = np.asarray(angle, dtype=float)
    c2 = np.cos(angle) ** 2
    s2 = np.sin(angle) ** 2
    quart = c2**2
    lin = s2 - 0.5 * c2
    disc = np.sqrt(lin**2 + 4.0 * quart * level)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(quart > 1e-12, (disc - lin) / (2.0 * quart), level / lin)
    return np.sqrt(u)


def equispaced_loop_points(n: int, level: float = 1.0, resolution: int = 4096) -> Array:
    """``n`` points on the limiting loop, equispaced in arc length.

    Arc length is accumulated numerically on a fine angular grid; the
    resulting parametrization is recorded by the CLI alongside experiment
    outputs so start points are reproducible.
    """
    t = np.linspace(0.0, 2.0 * np.pi, resolution + 1)
    r = loop_radius(t, level)
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    targets = arc[-1] * np.arange(n) / n
    t_at = np.interp(targets, arc, t)
    r_at = loop_radius(t_at, level)
    return np.column_stack([r_at * np.cos(t_at), r_at * np.sin(t_at)])


# -- linear-Gaussian model -----------------------------------------------------


def linear_gaussian_model(
    m_matrix: Array, offset: Array, sigma: float, observed: Array
) -> ModelSpec:
    """``y = M theta + f + sigma eta`` with standard normal priors."""
    m_matrix = np.asarray(m_matrix, dtype=float)
    offset = np.asarray(offset, dtype=float)
    d_y, d_theta = m_matrix.shape

    return ModelSpec(
        dim_theta=d_theta,
        dim_y=d_y,
        observed=observed,
        forward=lambda th: m_matrix @ np.asarray(th, dtype=float) + offset,
        noise_scale=float(sigma),
        prior_potential_theta=lambda th: 0.5 * float(np.dot(th, th)),
        jacobian=lambda th: m_matrix,
        forward_hessian=lambda th: np.zeros((d_y, d_theta, d_theta)),
        grad_prior_theta=lambda th: np.asarray(th, dtype=float),
        prior_sample=lambda rng: rng.standard_normal(d_theta),
        name="linear_gaussian",
        meta={"sigma": float(sigma)},
    )


def whiten_linear_gaussian(
    m_matrix: Array,
    offset: Array,
    sigma: float,
    observed: Array,
    prior_mean: Array,
    prior_cov: Array,
) -> ModelSpec:
    """Reparametrize a general-Gaussian-prior linear model to standard form.

    With ``L L' = C`` the substitution ``theta = L^{-1}(theta' - m)`` turns a
    ``Normal(m, C)`` prior into a standard normal one with forward matrix
    ``M L`` and offset ``f + M m``.
    """
    chol = np.linalg.cholesky(np.asarray(prior_cov, dtype=float))
    m_matrix = np.asarray(m_matrix, dtype=float)
    new_offset = np.asarray(offset, dtype=float) + m_matrix @ np.asarray(prior_mean, dtype=float)
    return linear_gaussian_model(m_matrix @ chol, new_offset, sigma, observed)


def linear_gaussian_posterior(model: ModelSpec) -> tuple[Array, Array]:
    """Analytic posterior mean and covariance of a linear-Gaussian model."""
    theta0 = np.zeros(model.dim_theta)
    m_matrix = md.jacobian_forward(model, theta0)
    offset = md.evaluate_forward(model, theta0)
    sigma = md.noise_value(model, theta0)
    cov = np.linalg.inv(np.eye(model.dim_theta) + m_matrix.T @ m_matrix / sigma**2)
    mean = cov @ m_matrix.T @ (model.observed - offset) / sigma**2
    return mean, cov


def harmonic_reference(
    mean: Array, theta0: Array, v0: Array, times: Array
) -> Array:
    """Closed-form latent trajectory of the lifted linear-Gaussian dynamics.

    Each coordinate oscillates harmonically around the posterior mean with
    unit angular frequency: ``theta(t) = mu + (theta0 - mu) cos t + v0 sin t``.
    """
    times = np.asarray(times, dtype=float)[:, None]
    return mean + (theta0 - mean) * np.cos(times) + v0 * np.sin(times)


def constrained_dynamics_reference(model: ModelSpec, q0, p0: Array, t_end: float, eps: float):
    """Integrate the constrained dynamics of a linear-Gaussian model.

    Returns ``(times, thetas, reference)`` where ``reference`` is the
    analytic harmonic solution started from the same latent position and
    velocity.  Used to verify the integrator reproduces the exact
    continuous-time behaviour to second order in the step size.
    """
    from .geometry import LiftedGeometry
    from .integrators import constrained_step

    geo = LiftedGeometry(model)
    if not isinstance(q0, np.ndarray):
        pt = q0
    else:
        pt = geo.point(q0)
    p = geo.project_momentum(np.asarray(p0, dtype=float), pt)
    mean, _ = linear_gaussian_posterior(model)
    theta0 = pt.theta.copy()
    v0 = p[: model.dim_theta].copy()

    n_steps = int(round(t_end / eps))
    times = np.arange(n_steps + 1) * eps
    thetas = np.empty((n_steps + 1, model.dim_theta))
    thetas[0] = theta0
    for k in range(n_steps):
        out = constrained_step(geo, pt, p, eps)
        if out.failed:
            raise RuntimeError("constrained step failed on a linear model")
        pt, p = out.q1, out.p1
        thetas[k + 1] = pt.theta
    return times, thetas, harmonic_reference(mean, theta0, v0, times)


def effective_mass_matrix(model: ModelSpec, theta: Array) -> Array:
    """Latent-space mass matrix induced by the constrained dynamics.

    Reconstructed column by column: each latent basis velocity is lifted to
    the unique tangent vector of the manifold above ``theta`` and pulled back
    through the parametrization ``gamma(theta) = (theta, (y - F)/sigma)``.
    Agrees with the expected-information metric of
    :func:`manifoldmc.models.fisher_metric`.
    """
    theta = np.asarray(theta, dtype=float)
    s = md.noise_value(model, theta)
    a = md.jacobian_forward(model, theta)
    if not model.constant_noise:
        eta = (model.observed - md.evaluate_forward(model, theta)) / s
        a = a + np.outer(eta, md.noise_jacobian(model, theta))
    d = model.dim_theta
    mass = np.empty((d, d))
    for k in range(d):
        v_theta = np.zeros(d)
        v_theta[k] = 1.0
        # tangency DC (v_theta, v_eta) = 0 fixes the noise-block velocity
        v_eta = -(a @ v_theta) / s
        # pull back through Dgamma' = [I, -A'/sigma]
        mass[:, k] = v_theta - a.T @ v_eta / s
    return mass


@dataclass(frozen=True)
class SimulatedDataset:
    """A simulated dataset with the information needed to regenerate it."""

    observed: Array
    truth: dict
    sigma: float
    seed: int


def save_dataset(dataset: SimulatedDataset, csv_path) -> None:
    """Persist observations as CSV with a JSON sidecar (seed, sigma, truth)."""
    import json
    from pathlib import Path

    csv_path = Path(csv_path)
    obs = np.atleast_1d(dataset.observed)
    lines = ["index,observed"]
    lines += [f"{i},{repr(float(v))}" for i, v in enumerate(obs)]
    csv_path.write_text("\n".join(lines) + "\n")
    truth = {
        k: (v.tolist() if isinstance(v, np.ndarray) else v)
        for k, v in dataset.truth.items()
    }
    sidecar = {"seed": dataset.seed, "sigma": dataset.sigma, "truth": truth}
    csv_path.with_suffix(".meta.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(csv_path) -> SimulatedDataset:
    import json
    from pathlib import Path

    csv_path = Path(csv_path)
    rows = csv_path.read_text().strip().splitlines()[1:]
    observed = np.array([float(r.split(",")[1]) for r in rows])
    meta = json.loads(csv_path.with_suffix(".meta.json").read_text())
    truth = {
        k: (np.asarray(v) if isinstance(v, list) else v)
        for k, v in meta["truth"].items()
    }
    return SimulatedDataset(
        observed=observed, truth=truth, sigma=meta["sigma"], seed=meta["seed"]
    )


# -- nonlinear AR(1) state-space model -------------------------------------------
#
# Latent AR(1) dynamics with exponential-link observations:
#   x_1 ~ Normal(mu, gamma^2 / (1 - rho^2)),
#   x_t = mu + rho (x_{t-1} - mu) + gamma nu_t,
#   y_t = exp(x_t) + sigma eta_t.
# Parameters are handled in unconstrained coordinates phi = (mu, g, r, s) with
# gamma = exp(g), rho = tanh(r), sigma = exp(s); the prior densities
# (HalfNormal / Uniform) pick up the transform Jacobians.


def _ssm_unpack(phi):
    mu, g, r, s = phi[0], phi[1], phi[2], phi[3]
    from . import autodiff as adm

    gamma = adm.exp(g)
    rho = adm.tanh(r)
    sigma = adm.exp(s)
    return mu, gamma, rho, sigma


class _NonlinearSsmBlocks:
    """Vectorized residuals, Jacobian blocks and Hessians for the AR(1) SSM."""

    def __init__(self, observed: Array):
        self.y = np.asarray(observed, dtype=float).ravel()
        self.t_steps = self.y.shape[0]

    def _common(self, phi, eta):
        mu, g, r, s = phi
        gamma, rho, sigma = np.exp(g), np.tanh(r), np.exp(s)
        w = self.y - sigma * eta
        if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
            from .exceptions import DomainError

            raise DomainError("observation inverse requires y - sigma*eta > 0")
        xbar = np.log(w)
        d_eta = -sigma / w  # d xbar / d eta
        d_s = -sigma * eta / w  # d xbar / d s
        h_ee = -(sigma**2) / w**2  # d2 xbar / d eta^2
        h_es = -sigma * self.y / w**2  # d2 xbar / d eta d s
        h_ss = eta * h_es  # d2 xbar / d s^2
        return mu, gamma, rho, sigma, w, xbar, d_eta, d_s, h_ee, h_es, h_ss

    def blocks(self, phi, nu, eta):
        from .ssm import BlockData

        t = self.t_steps
        mu, gamma, rho, sigma, w, xbar, d_eta, d_s, *_ = self._common(phi, eta)
        c_rho = 1.0 / np.sqrt(1.0 - rho**2)
        rho_p = 1.0 - rho**2

        resid = np.empty(t)
        resid[0] = mu + gamma * c_rho * nu[0] - xbar[0]
        resid[1:] = mu + rho * (xbar[:-1] - mu) + gamma * nu[1:] - xbar[1:]

        u = np.empty((t, 4))
        u[0] = [1.0, gamma * c_rho * nu[0], gamma * nu[0] * rho * c_rho, -d_s[0]]
        u[1:, 0] = 1.0 - rho
        u[1:, 1] = gamma * nu[1:]
        u[1:, 2] = (xbar[:-1] - mu) * rho_p
        u[1:, 3] = rho * d_s[:-1] - d_s[1:]

        d_nu = np.full(t, gamma)
        d_nu[0] = gamma * c_rho
        a = -d_eta
        b = np.zeros(t)
        b[1:] = rho * d_eta[:-1]
        return BlockData(
            resid=resid[:, None],
            u=u[:, None, :],
            d_nu=d_nu[:, None, None],
            a=a[:, None, None],
            b=b[:, None, None],
        )

    def hessians(self, phi, nu, eta):
        # local ordering: (mu, g, r, s, nu_t, eta_prev, eta_cur)
        t = self.t_steps
        mu, gamma, rho, sigma, w, xbar, d_eta, d_s, h_ee, h_es, h_ss = self._common(
            phi, eta
        )
        c_rho = 1.0 / np.sqrt(1.0 - rho**2)
        rho_p = 1.0 - rho**2
        hess = np.zeros((t, 7, 7))

        def sym(idx, i, j, val):
            hess[idx, i, j] = val
            if i != j:
                hess[idx, j, i] = val

        # first block: mu + gamma c_rho nu_0 - xbar_0
        sym(0, 1, 1, gamma * c_rho * nu[0])
        sym(0, 1, 2, gamma * nu[0] * rho * c_rho)
        sym(0, 1, 4, gamma * c_rho)
        sym(0, 2, 2, gamma * nu[0] * c_rho)
        sym(0, 2, 4, gamma * rho * c_rho)
        sym(0, 3, 3, -h_ss[0])
        sym(0, 3, 6, -h_es[0])
        sym(0, 6, 6, -h_ee[0])

        # remaining blocks: mu + rho (xbar_prev - mu) + gamma nu_t - xbar_t
        idx = np.arange(1, t)
        hess[idx, 1, 1] = gamma * nu[1:]
        hess[idx, 1, 4] = hess[idx, 4, 1] = gamma
        hess[idx, 2, 2] = (xbar[:-1] - mu) * (-2.0 * rho * rho_p)
        hess[idx, 2, 0] = hess[idx, 0, 2] = -rho_p
        hess[idx, 2, 3] = hess[idx, 3, 2] = d_s[:-1] * rho_p
        hess[idx, 2, 5] = hess[idx, 5, 2] = d_eta[:-1] * rho_p
        hess[idx, 3, 3] = rho * h_ss[:-1] - h_ss[1:]
        hess[idx, 3, 5] = hess[idx, 5, 3] = rho * h_es[:-1]
        hess[idx, 3, 6] = hess[idx, 6, 3] = -h_es[1:]
        hess[idx, 5, 5] = rho * h_ee[:-1]
        hess[idx, 6, 6] = -h_ee[1:]
        return hess[:, None, :, :]


def _ssm_prior_potential_phi(phi) -> float:
    mu, g, r, s = phi
    return float(
        0.5 * mu**2
        + 0.5 * np.exp(2.0 * g)
        - g
        + 2.0 * np.log(np.cosh(r))
        + np.exp(2.0 * s) / 18.0
        - s
    )


def _ssm_grad_prior_phi(phi):
    mu, g, r, s = phi
    return np.array(
        [mu, np.exp(2.0 * g) - 1.0, 2.0 * np.tanh(r), np.exp(2.0 * s) / 9.0 - 1.0]
    )


def _ssm_prior_sample(rng: np.random.Generator, t_steps: int):
    mu = rng.standard_normal()
    g = np.log(np.abs(rng.standard_normal()) + 1e-12)
    r = np.arctanh(rng.uniform(-1.0, 1.0) * 0.999999)
    s = np.log(np.abs(3.0 * rng.standard_normal()) + 1e-12)
    nu = rng.standard_normal(t_steps)
    return np.concatenate([[mu, g, r, s], nu])


def _ssm_states(phi, nu):
    mu, g, r, _ = phi
    gamma, rho = np.exp(g), np.tanh(r)
    import scipy.signal

    nu_scaled = np.array(nu, dtype=float)
    nu_scaled[0] /= np.sqrt(1.0 - rho**2)
    dev = scipy.signal.lfilter([gamma], [1.0, -rho], nu_scaled)
    return mu + dev


def nonlinear_ssm_spec(observed: Array):
    """Build the :class:`~manifoldmc.ssm.SsmSpec` for the AR(1) SSM."""
    from . import autodiff as adm
    from .exceptions import DomainError
    from .ssm import SsmSpec

    y = np.asarray(observed, dtype=float).ravel()
    t_steps = y.shape[0]

    def xbar_of(sigma, eta_t, y_t):
        w = y_t - sigma * eta_t
        if float(w) <= 0.0:
            raise DomainError("y - sigma*eta must stay positive")
        return adm.log(w)

    def block_residual(phi, nu_t, eta_prev, eta_t, t):
        mu, gamma, rho, sigma = _ssm_unpack(phi)
        xb_t = xbar_of(sigma, eta_t[0], y[t])
        if t == 0:
            return [mu + gamma / adm.sqrt(1.0 - rho * rho) * nu_t[0] - xb_t]
        xb_prev = xbar_of(sigma, eta_prev[0], y[t - 1])
        return [mu + rho * (xb_prev - mu) + gamma * nu_t[0] - xb_t]

    def initial_eta(phi, nu):
        sigma = np.exp(phi[3])
        return (y - np.exp(_ssm_states(phi, nu))) / sigma

    return SsmSpec(
        n_steps=t_steps,
        d_x=1,
        d_y=1,
        d_phi=4,
        observed=y[:, None],
        block_residual=block_residual,
        initial_eta=initial_eta,
        prior_potential_phi=_ssm_prior_potential_phi,
        grad_prior_phi=_ssm_grad_prior_phi,
        prior_sample=lambda rng: _ssm_prior_sample(rng, t_steps),
        vectorized=_NonlinearSsmBlocks(y),
        name="nonlinear_ssm",
    )


def simulate_nonlinear_ssm(
    t_steps: int,
    sigma: float,
    seed: int,
    mu: float = -0.5,
    gamma: float = 0.4,
    rho: float = 0.9,
) -> SimulatedDataset:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = np.empty(t_steps)
    x[0] = mu + gamma / np.sqrt(1.0 - rho**2) * rng.standard_normal()
    for t in range(1, t_steps):
        x[t] = mu + rho * (x[t - 1] - mu) + gamma * rng.standard_normal()
    observed = np.exp(x) + sigma * rng.standard_normal(t_steps)
    return SimulatedDataset(
        observed=observed,
        truth={"mu": mu, "gamma": gamma, "rho": rho, "x": x},
        sigma=float(sigma),
        seed=seed,
    )


class SsmHmcTarget:
    """Latent-space negative log posterior of the AR(1) SSM, with gradient.

    The AR recursion and its adjoint are linear filters, so both the
    potential and its gradient are a handful of vectorized passes.
    """

    def __init__(self, observed: Array):
        self.y = np.asarray(observed, dtype=float).ravel()
        self.t_steps = self.y.shape[0]
        self.dim = 4 + self.t_steps

    def prior_sample(self, rng: np.random.Generator):
        return _ssm_prior_sample(rng, self.t_steps)

    def _parts(self, theta):
        phi, nu = theta[:4], theta[4:]
        mu, g, r, s = phi
        gamma, rho, sigma = np.exp(g), np.tanh(r), np.exp(s)
        import scipy.signal

        nu_scaled = np.array(nu, dtype=float)
        c_rho = 1.0 / np.sqrt(1.0 - rho**2)
        nu_scaled[0] *= c_rho
        dev = scipy.signal.lfilter([gamma], [1.0, -rho], nu_scaled)
        x = mu + dev
        resid = self.y - np.exp(x)
        return phi, nu, gamma, rho, sigma, c_rho, dev, x, resid

    def potential(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        phi, nu, gamma, rho, sigma, c_rho, dev, x, resid = self._parts(theta)
        return (
            _ssm_prior_potential_phi(phi)
            + 0.5 * float(nu @ nu)
            + 0.5 * float(resid @ resid) / sigma**2
            + self.t_steps * np.log(sigma)
        )

    def grad(self, theta):
        import scipy.signal

        theta = np.asarray(theta, dtype=float)
        phi, nu, gamma, rho, sigma, c_rho, dev, x, resid = self._parts(theta)
        q = -resid * np.exp(x) / sigma**2  # dU/dx_t
        lam = scipy.signal.lfilter([1.0], [1.0, -rho], q[::-1])[::-1]
        g_nu = gamma * lam + nu
        g_nu[0] += gamma * lam[0] * (c_rho - 1.0)
        # rho sensitivity: e_t = d x_t / d rho via its own recursion
        e_input = np.empty(self.t_steps)
        e_input[0] = gamma * nu[0] * rho * c_rho**3
        e_input[1:] = dev[:-1]
        e = scipy.signal.lfilter([1.0], [1.0, -rho], e_input)
        g_phi = _ssm_grad_prior_phi(phi) + np.array(
            [
                float(np.sum(q)),
                float(q @ dev),
                float(q @ e) * (1.0 - rho**2),
                -float(resid @ resid) / sigma**2 + self.t_steps,
            ]
        )
        return np.concatenate([g_phi, g_nu])


# -- FitzHugh-Nagumo ODE model ----------------------------------------------------
#
# Nine unknowns in unconstrained coordinates:
#   (x0(0), x1(0), log alpha, log beta, log gamma, log delta, log epsilon,
#    log zeta, log sigma)
# with the first state observed at 200 equispaced times on [0, 20].  The
# natural parametrization is non-identifiable: rescaling the second state by
# s > 0 while mapping (gamma, delta, zeta) -> (gamma/s, s delta, s zeta)
# leaves the observed dynamics unchanged.

FHN_TRUTH = {
    "x0_init": 1.0,
    "x1_init": -1.0,
    "alpha": 3.0,
    "beta": 1.0,
    "gamma": 3.0,
    "delta": 1.0 / 3.0,
    "epsilon": 1.0 / 15.0,
    "zeta": 1.0 / 15.0,
}
FHN_PRIOR_MEANS = np.array([0.0, 0.0, 0.0, 0.0, 0.0, -1.0, -2.0, -2.0, 0.0])
FHN_N_OBS = 200
FHN_HORIZON = 20.0
_FHN_LOG_SLOTS = slice(2, 8)


def rk4_step(f, x, h):
    """One classical Runge-Kutta step of ``dx/dt = f(x)``."""
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def fhn_rhs(params):
    """Right-hand side of the two-state system for natural parameters."""
    x0_init, x1_init, alpha, beta, gamma, delta, eps_fhn, zeta = params

    def f(x):
        return np.array(
            [
                alpha * x[0] - beta * x[0] ** 3 + gamma * x[1],
                -delta * x[0] - eps_fhn * x[1] + zeta,
            ]
        )

    return f


def fhn_simulate(params, t_grid, max_step: float = 0.02) -> Array:
    """RK4 trajectory of both states at the requested (increasing) times.

    Each interval is subdivided so no internal step exceeds ``max_step``.
    Blow-up raises ``DomainError`` so callers can map it to a rejection.
    """
    from .exceptions import DomainError

    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    params = np.asarray(params, dtype=float)
    f = fhn_rhs(params)
    x = params[:2].copy()
    out = np.empty((t_grid.shape[0], 2))
    t_now = 0.0
    idx = 0
    if t_grid[0] == 0.0:
        out[0] = x
        idx = 1
    for k in range(idx, t_grid.shape[0]):
        span = t_grid[k] - t_now
        n_sub = max(1, int(np.ceil(span / max_step)))
        h = span / n_sub
        for _ in range(n_sub):
            x = rk4_step(f, x, h)
        if not np.all(np.isfinite(x)):
            raise DomainError(f"trajectory blew up before t={t_grid[k]}")
        out[k] = x
        t_now = t_grid[k]
    return out


def fhn_scaling_transform(params9, s: float):
    """Apply the non-identifiability scaling to a 9-vector of natural values."""
    if s <= 0:
        raise ValueError("scaling factor must be positive")
    x0, x1, alpha, beta, gamma, delta, eps_fhn, zeta, sigma = np.asarray(
        params9, dtype=float
    )
    return np.array(
        [x0, s * x1, alpha, beta, gamma / s, s * delta, eps_fhn, s * zeta, sigma]
    )


def fhn_observation_times(n_obs: int = FHN_N_OBS, horizon: float = FHN_HORIZON):
    return horizon * np.arange(n_obs) / (n_obs - 1)


class FitzHughNagumoModel:
    """Compiled forward map, Jacobian and Hessian stack for the FHN model.

    A tiny memo keyed on the parameter bytes avoids re-integrating when the
    constraint value, Jacobian and Hessian are requested at the same point
    (as happens once per accepted integrator step).
    """

    def __init__(self, n_obs: int = FHN_N_OBS, steps_per_obs: int = 5):
        self.n_obs = n_obs
        self.steps_per_obs = steps_per_obs
        self.dt = FHN_HORIZON / (n_obs - 1) / steps_per_obs
        self._memo: dict = {}

    def natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        nat = theta[:8].copy()
        nat[_FHN_LOG_SLOTS] = np.exp(nat[_FHN_LOG_SLOTS])
        return nat

    def _integrate(self, theta, order: int):
        from . import _fhn
        from .exceptions import DomainError

        key = (np.asarray(theta, dtype=float)[:8].tobytes(), order)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        nat = self.natural(theta)
        obs_x, obs_s, obs_r, ok = _fhn.integrate(
            np.ascontiguousarray(nat[2:]),
            np.ascontiguousarray(nat[:2]),
            self.n_obs,
            self.steps_per_obs,
            self.dt,
            order,
        )
        if not ok or not np.all(np.isfinite(obs_x[:, 0])):
            raise DomainError("FitzHugh-Nagumo trajectory blew up")
        if len(self._memo) > 16:
            self._memo.clear()
        self._memo[key] = (obs_x, obs_s, obs_r)
        return self._memo[key]

    def forward(self, theta):
        return self._integrate(theta, 0)[0][:, 0].copy()

    def jacobian(self, theta):
        nat = self.natural(theta)
        sens = self._integrate(theta, 1)[1][:, 0, :]  # (n_obs, 8) natural
        jac = np.zeros((self.n_obs, 9))
        scale = np.ones(8)
        scale[_FHN_LOG_SLOTS] = nat[_FHN_LOG_SLOTS]
        jac[:, :8] = sens * scale
        return jac

    def hessian(self, theta):
        nat = self.natural(theta)
        _, sens_all, hess_all = self._integrate(theta, 2)
        sens = sens_all[:, 0, :]
        hess_nat = hess_all[:, 0, :, :]  # (n_obs, 8, 8)
        scale = np.ones(8)
        scale[_FHN_LOG_SLOTS] = nat[_FHN_LOG_SLOTS]
        out = np.zeros((self.n_obs, 9, 9))
        out[:, :8, :8] = hess_nat * scale[None, :, None] * scale[None, None, :]
        # exp reparametrization adds the first-order term on the diagonal
        for i in range(2, 8):
            out[:, i, i] += sens[:, i] * scale[i]
        return out


def fhn_model(
    observed: Array,
    steps_per_obs: int = 5,
    n_obs: int = FHN_N_OBS,
) -> ModelSpec:
    """ModelSpec for the FitzHugh-Nagumo posterior with inferred noise scale."""
    engine = FitzHughNagumoModel(n_obs=n_obs, steps_per_obs=steps_per_obs)
    means = FHN_PRIOR_MEANS

    def noise_jac(theta):
        out = np.zeros(9)
        out[8] = np.exp(theta[8])
        return out

    def noise_hess(theta):
        out = np.zeros((9, 9))
        out[8, 8] = np.exp(theta[8])
        return out

    return ModelSpec(
        dim_theta=9,
        dim_y=n_obs,
        observed=observed,
        forward=engine.forward,
        noise_scale=lambda th: float(np.exp(th[8])),
        prior_potential_theta=lambda th: 0.5 * float(np.sum((th - means) ** 2)),
        jacobian=engine.jacobian,
        forward_hessian=engine.hessian,
        noise_jacobian=noise_jac,
        noise_hessian=noise_hess,
        grad_prior_theta=lambda th: np.asarray(th, float) - means,
        prior_sample=lambda rng: means + rng.standard_normal(9),
        name="fhn",
        meta={"steps_per_obs": steps_per_obs},
    )


def fhn_truth_theta(sigma: float) -> Array:
    """Ground-truth parameters in unconstrained coordinates."""
    t = FHN_TRUTH
    return np.array(
        [
            t["x0_init"],
            t["x1_init"],
            np.log(t["alpha"]),
            np.log(t["beta"]),
            np.log(t["gamma"]),
            np.log(t["delta"]),
            np.log(t["epsilon"]),
            np.log(t["zeta"]),
            np.log(sigma),
        ]
    )


def simulate_fhn(sigma: float, seed: int, steps_per_obs: int = 5) -> SimulatedDataset:
    engine = FitzHughNagumoModel(steps_per_obs=steps_per_obs)
    theta = fhn_truth_theta(sigma)
    clean = engine.forward(theta)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    observed = clean + sigma * rng.standard_normal(clean.shape[0])
    return SimulatedDataset(
        observed=observed, truth=dict(FHN_TRUTH), sigma=float(sigma), seed=seed
    )


def fhn_log_likelihood(params9, observed, steps_per_obs: int = 5) -> float:
    """Gaussian log likelihood of natural parameters given observations."""
    params9 = np.asarray(params9, dtype=float)
    traj = fhn_simulate(
        params9[:8],
        fhn_observation_times(),
        max_step=FHN_HORIZON / (FHN_N_OBS - 1) / steps_per_obs,
    )
    sigma = params9[8]
    resid = np.asarray(observed, dtype=float) - traj[:, 0]
    n = resid.shape[0]
    return float(
        -0.5 * resid @ resid / sigma**2 - n * np.log(sigma) - 0.5 * n * np.log(2 * np.pi)
    )
