"""FitzHugh-Nagumo dynamics with forward sensitivities, compiled with numba.

The two-state system is

    dx0/dt = alpha x0 - beta x0^3 + gamma x1
    dx1/dt = -delta x0 - epsilon x1 + zeta

integrated with a fixed-step fourth-order Runge-Kutta scheme.  Alongside the
states the kernel can propagate first-order sensitivities S = dx/dtheta and
second-order sensitivities R = d2x/dtheta2 with respect to the eight natural
quantities (x0(0), x1(0), alpha, beta, gamma, delta, epsilon, zeta); the
sensitivity equations are the hand-derived variational systems of the RHS
above, validated against finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from numba import njit

N_PAR = 8  # two initial states + six dynamics parameters
_X, _S, _R = 2, 2 * N_PAR, 2 * N_PAR * N_PAR
_SIZE = _X + _S + _R


@njit(cache=True)
def _aug_rhs(y, par, order, out):
    a, b, g, d, e, z = par[0], par[1], par[2], par[3], par[4], par[5]
    x0, x1 = y[0], y[1]
    out[0] = a * x0 - b * x0**3 + g * x1
    out[1] = -d * x0 - e * x1 + z
    if order < 1:
        return
    j00 = a - 3.0 * b * x0 * x0
    s = y[_X : _X + _S].reshape(2, N_PAR)
    ds = out[_X : _X + _S].reshape(2, N_PAR)
    for i in range(N_PAR):
        ds[0, i] = j00 * s[0, i] + g * s[1, i]
        ds[1, i] = -d * s[0, i] - e * s[1, i]
    ds[0, 2] += x0
    ds[0, 3] += -(x0**3)
    ds[0, 4] += x1
    ds[1, 5] += -x0
    ds[1, 6] += -x1
    ds[1, 7] += 1.0
    if order < 2:
        return
    r = y[_X + _S :].reshape(2, N_PAR, N_PAR)
    dr = out[_X + _S :].reshape(2, N_PAR, N_PAR)
    c = -6.0 * b * x0
    x0sq3 = -3.0 * x0 * x0
    for i in range(N_PAR):
        for j in range(N_PAR):
            dr[0, i, j] = j00 * r[0, i, j] + g * r[1, i, j] + c * s[0, i] * s[0, j]
            dr[1, i, j] = -d * r[0, i, j] - e * r[1, i, j]
    for i in range(N_PAR):
        s0, s1 = s[0, i], s[1, i]
        dr[0, i, 2] += s0
        dr[0, 2, i] += s0
        dr[0, i, 3] += x0sq3 * s0
        dr[0, 3, i] += x0sq3 * s0
        dr[0, i, 4] += s1
        dr[0, 4, i] += s1
        dr[1, i, 5] += -s0
        dr[1, 5, i] += -s0
        dr[1, i, 6] += -s1
        dr[1, 6, i] += -s1


@njit(cache=True)
def integrate(par, x_init, n_obs, n_sub, dt, order):
    """RK4-integrate states (and sensitivities) over an equispaced grid.

    Records the augmented state at the ``n_obs`` observation times, the first
    of which is the initial time.  Returns ``(obs_x, obs_s, obs_r, ok)``;
    ``ok`` is false when the state stopped being finite.
    """
    y = np.zeros(_SIZE)
    y[0] = x_init[0]
    y[1] = x_init[1]
    if order >= 1:
        y[_X + 0] = 1.0  # d x0 / d x0(0)
        y[_X + N_PAR + 1] = 1.0  # d x1 / d x1(0)
    obs_x = np.empty((n_obs, 2))
    obs_s = np.empty((n_obs, 2, N_PAR))
    obs_r = np.empty((n_obs, 2, N_PAR, N_PAR))
    k1 = np.empty(_SIZE)
    k2 = np.empty(_SIZE)
    k3 = np.empty(_SIZE)
    k4 = np.empty(_SIZE)
    tmp = np.empty(_SIZE)

    def record(idx):
        obs_x[idx, 0] = y[0]
        obs_x[idx, 1] = y[1]
        if order >= 1:
            obs_s[idx] = y[_X : _X + _S].reshape(2, N_PAR).copy()
        if order >= 2:
            obs_r[idx] = y[_X + _S :].reshape(2, N_PAR, N_PAR).copy()

    size = _X
    if order >= 1:
        size += _S
    if order >= 2:
        size += _R
    record(0)
    for obs in range(1, n_obs):
        for _ in range(n_sub):
            _aug_rhs(y, par, order, k1)
            for i in range(size):
                tmp[i] = y[i] + 0.5 * dt * k1[i]
            _aug_rhs(tmp, par, order, k2)
            for i in range(size):
                tmp[i] = y[i] + 0.5 * dt * k2[i]
            _aug_rhs(tmp, par, order, k3)
            for i in range(size):
                tmp[i] = y[i] + dt * k3[i]
            _aug_rhs(tmp, par, order, k4)
            for i in range(size):
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not np.isfinite(y[0]) or not np.isfinite(y[1]):
            return obs_x, obs_s, obs_r, False
        record(obs)
    return obs_x, obs_s, obs_r, True
