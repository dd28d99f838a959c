"""Leapfrog integrators: the unconstrained step and its manifold variant.

The constrained step keeps positions on the constraint manifold and momenta
in its tangent spaces by interleaving the leapfrog updates with momentum and
position projections.  It is a RATTLE-style scheme with one extra intermediate
momentum projection; with exact projections it is symplectic, and running it
with a negated step size exactly inverts a successful step, which is what the
per-step reversibility checks in the samplers rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import ManifoldPoint

Array = np.ndarray


def leapfrog_step(grad_u: Callable, p0: Array, q0: Array, eps: float):
    """One unconstrained leapfrog step; returns ``(p1, q1)``."""
    p_half = p0 - 0.5 * eps * grad_u(q0)
    q1 = q0 + eps * p_half
    p1 = p_half - 0.5 * eps * grad_u(q1)
    return p1, q1


@dataclass
class StepOutcome:
    """Result of one constrained step.

    When ``failed`` is set the state fields must not be used as a sampler
    state; they are retained only so callers can log what went wrong.
    ``substep_log`` holds the intermediate stage values when requested.
    """

    q1: Optional[ManifoldPoint]
    p1: Optional[Array]
    failed: bool
    newton_iters: int
    substep_log: Optional[dict] = None


def constrained_step(
    geo,
    q0: ManifoldPoint,
    p0: Array,
    eps: float,
    solver: str = "newton",
    record_substeps: bool = False,
) -> StepOutcome:
    """One constrained leapfrog step from an on-manifold state.

    The sequence is: unconstrained momentum half-step; projection onto the
    tangent space at ``q0``; unconstrained position step; position projection
    back onto the manifold along the normal space of ``q0``; recovery of the
    effective half-step momentum as ``(q1 - q0) / eps``; unconstrained
    momentum half-step; projection onto the tangent space at ``q1``.

    Position-projection failures are reported through the ``failed`` flag
    rather than raised: a failed step is a rejected proposal, not an error.
    """
    p_half_tilde = p0 - 0.5 * eps * geo.grad_potential(q0)
    p_half = geo.project_momentum(p_half_tilde, q0)
    q1_tilde = q0.q + eps * p_half
    log = (
        {"p_half_projected": p_half.copy(), "q1_unprojected": q1_tilde.copy()}
        if record_substeps
        else None
    )
    proj = geo.project_position(q1_tilde, q0, solver=solver)
    if proj.failed:
        return StepOutcome(None, None, True, proj.iters, log)
    q1 = proj.point
    p_half = (q1.q - q0.q) / eps
    if record_substeps:
        log["p_half_recovered"] = p_half.copy()
    p1_tilde = p_half - 0.5 * eps * geo.grad_potential(q1)
    p1 = geo.project_momentum(p1_tilde, q1)
    if not (np.all(np.isfinite(q1.q)) and np.all(np.isfinite(p1))):
        return StepOutcome(None, None, True, proj.iters, log)
    return StepOutcome(q1, p1, False, proj.iters, log)
