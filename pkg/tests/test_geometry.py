import numpy as np
import pytest

from manifoldmc import autodiff as ad
from manifoldmc import geometry as gm
from manifoldmc import models as md
from manifoldmc import zoo
from manifoldmc.geometry import GramFactor, LiftedGeometry


@pytest.fixture
def toy_geo(toy_model):
    return LiftedGeometry(toy_model)


class TestConstraint:
    def test_zero_noise_point(self):
        model = zoo.toy_loop_model(0.5)
        assert gm.constraint(model, [0.0, 1.0], [0.0]) == pytest.approx(0.0)

    def test_balancing_noise(self):
        model = zoo.toy_loop_model(0.5)
        assert gm.constraint(model, [0.0, 0.0], [2.0]) == pytest.approx(0.0)

    def test_initialization_map_is_exact(self, toy_model, rng):
        geo = LiftedGeometry(toy_model)
        for _ in range(10):
            pt = geo.lift(rng.standard_normal(2))
            assert geo.constraint_norm(pt) < 1e-12


class TestConstraintJacobian:
    def test_constant_sigma_right_block(self, toy_model, rng):
        geo = LiftedGeometry(toy_model)
        pt = geo.point(rng.standard_normal(3))
        jac = geo.constraint_jacobian(pt)
        assert np.allclose(jac[:, 2:], 0.1 * np.eye(1))

    def test_linear_model_everywhere(self, linear_model, rng):
        geo = LiftedGeometry(linear_model)
        m = md.jacobian_forward(linear_model, np.zeros(3))
        for _ in range(3):
            pt = geo.point(rng.standard_normal(5))
            expected = np.concatenate([m, 0.7 * np.eye(2)], axis=1)
            assert np.allclose(geo.constraint_jacobian(pt), expected)

    def test_toy_value_and_fd(self, toy_model):
        geo = LiftedGeometry(toy_model)
        pt = geo.point_from([1.0, 1.0], [0.3])
        jac = geo.constraint_jacobian(pt)
        assert np.allclose(jac, [[3.0, 2.0, 0.1]])
        fd = ad.central_difference_jacobian(
            lambda q: gm.constraint(toy_model, q[:2], q[2:]), pt.q
        )
        assert np.allclose(jac, fd, atol=1e-7)


class TestGram:
    def test_toy_scalar_value(self, toy_geo):
        pt = toy_geo.point_from([1.0, 1.0], [0.0])
        assert toy_geo.gram(pt).as_matrix() == pytest.approx(np.array([[13.01]]))

    def test_constant_forward_identity(self):
        model = md.ModelSpec(
            dim_theta=2,
            dim_y=3,
            observed=np.zeros(3),
            forward=lambda th: np.ones(3),
            noise_scale=1.0,
            prior_potential_theta=lambda th: 0.0,
            jacobian=lambda th: np.zeros((3, 2)),
            forward_hessian=lambda th: np.zeros((3, 2, 2)),
        )
        geo = LiftedGeometry(model)
        pt = geo.point(np.zeros(5))
        assert np.allclose(geo.gram(pt).as_matrix(), np.eye(3))

    def test_linear_gaussian_form(self, linear_model, rng):
        geo = LiftedGeometry(linear_model)
        pt = geo.point(rng.standard_normal(5))
        m = md.jacobian_forward(linear_model, np.zeros(3))
        assert np.allclose(geo.gram(pt).as_matrix(), m @ m.T + 0.49 * np.eye(2))

    def test_logdet_matches_eigenvalues(self, rng):
        for _ in range(10):
            a = rng.standard_normal((5, 7))
            fac = GramFactor(a, 0.8, "dense")
            eig = np.linalg.eigvalsh(fac.as_matrix())
            assert fac.logdet() == pytest.approx(np.sum(np.log(eig)), abs=1e-10)

    def test_woodbury_solve_matches_dense(self, rng):
        for _ in range(10):
            a = rng.standard_normal((6, 3))
            s = 0.4
            dense = GramFactor(a, s, "dense")
            wood = GramFactor(a, s, "woodbury")
            b = rng.standard_normal(6)
            assert np.allclose(dense.solve(b), wood.solve(b), atol=1e-8)
            assert wood.logdet() == pytest.approx(dense.logdet(), abs=1e-9)
            assert wood.trace_inv() == pytest.approx(dense.trace_inv(), rel=1e-9)


class TestPotential:
    def test_constant_forward_zero(self):
        model = md.ModelSpec(
            dim_theta=2,
            dim_y=2,
            observed=np.zeros(2),
            forward=lambda th: np.zeros(2),
            noise_scale=1.0,
            prior_potential_theta=lambda th: 0.5 * float(np.dot(th, th)),
            jacobian=lambda th: np.zeros((2, 2)),
            forward_hessian=lambda th: np.zeros((2, 2, 2)),
        )
        geo = LiftedGeometry(model)
        assert geo.potential(geo.point(np.zeros(4))) == pytest.approx(0.0)

    def test_toy_composition(self, toy_geo):
        pt = toy_geo.point_from([1.0, 1.0], [0.0])
        expected = 0.5 * 2.0 + 0.0 + 0.5 * np.log(13.01)
        assert toy_geo.potential(pt) == pytest.approx(expected)

    def test_linear_gaussian_quadratic_plus_constant(self, linear_model, rng):
        geo = LiftedGeometry(linear_model)
        vals = []
        for _ in range(5):
            pt = geo.point(rng.standard_normal(5))
            vals.append(
                geo.potential(pt)
                - 0.5 * float(pt.theta @ pt.theta)
                - 0.5 * float(pt.eta @ pt.eta)
            )
        assert np.ptp(vals) < 1e-12


class TestGradPotential:
    def test_linear_gaussian_logdet_grad_zero(self, linear_model, rng):
        geo = LiftedGeometry(linear_model)
        pt = geo.point(rng.standard_normal(5))
        expected = np.concatenate([pt.theta, pt.eta])
        assert np.allclose(geo.grad_potential(pt), expected, atol=1e-12)

    def test_matches_finite_differences(self, toy_geo, rng):
        for _ in range(10):
            q = rng.standard_normal(3)
            grad = toy_geo.grad_potential(toy_geo.point(q))
            fd = ad.central_difference_jacobian(
                lambda v: np.array([toy_geo.potential(toy_geo.point(v))]), q
            )[0]
            assert np.max(np.abs(grad - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_constant_sigma_eta_block_exact_zero(self, toy_geo, rng):
        pt = toy_geo.point(rng.standard_normal(3))
        grad = toy_geo.grad_potential(pt)
        # eta-gradient is the prior part only: log-det contributes nothing
        assert grad[2] == pytest.approx(pt.eta[0], abs=0.0)

    def test_position_dependent_sigma_fd(self, rng):
        # sigma(theta) = exp(theta_1 / 4): exercises every log-det gradient term
        def noise(th):
            return ad.exp(th[1] * 0.25) if isinstance(th[1], ad.Dual2) else float(
                np.exp(th[1] * 0.25)
            )

        base = zoo.toy_loop_model(1.0)
        model = md.ModelSpec(
            dim_theta=2,
            dim_y=1,
            observed=base.observed,
            forward=base.forward,
            noise_scale=noise,
            prior_potential_theta=base.prior_potential_theta,
            jacobian=base.jacobian,
            forward_hessian=base.forward_hessian,
            grad_prior_theta=base.grad_prior_theta,
        )
        geo = LiftedGeometry(model)
        for _ in range(5):
            q = rng.standard_normal(3)
            grad = geo.grad_potential(geo.point(q))
            fd = ad.central_difference_jacobian(
                lambda v: np.array([geo.potential(geo.point(v))]), q
            )[0]
            assert np.allclose(grad, fd, rtol=1e-5, atol=1e-6)


class TestMomentumProjection:
    def test_idempotent_on_tangent_vectors(self, toy_geo, rng):
        pt = toy_geo.lift(rng.standard_normal(2))
        p = toy_geo.project_momentum(rng.standard_normal(3), pt)
        assert np.allclose(toy_geo.project_momentum(p, pt), p, atol=1e-10)

    def test_coordinate_hyperplane(self):
        model = zoo.linear_gaussian_model(
            np.array([[1.0, 0.0]]), np.zeros(1), 1e-9, np.zeros(1)
        )
        # with sigma ~ 0 the constraint is effectively theta_0 = 0
        geo = LiftedGeometry(model)
        pt = geo.point(np.zeros(3))
        p = geo.project_momentum(np.array([1.0, 2.0, 3.0]), pt)
        assert abs(p[0]) < 1e-8
        assert p[1] == pytest.approx(2.0)

    def test_normal_directions_annihilated(self, toy_geo, rng):
        pt = toy_geo.lift(rng.standard_normal(2))
        lam = rng.standard_normal(1)
        p = toy_geo.project_momentum(toy_geo.jac_t_dot(pt, lam), pt)
        assert np.max(np.abs(p)) < 1e-10

    def test_tangency_after_projection(self, toy_geo, rng):
        for _ in range(20):
            pt = toy_geo.lift(rng.standard_normal(2))
            p_raw = rng.standard_normal(3)
            p = toy_geo.project_momentum(p_raw, pt)
            assert toy_geo.tangency_error(pt, p) <= 1e-8 * (1 + np.max(np.abs(p)))


class TestPositionProjection:
    @pytest.mark.parametrize("solver", ["newton", "symmetric_newton"])
    def test_linear_constraint_one_iteration(self, linear_model, rng, solver):
        geo = LiftedGeometry(linear_model)
        origin = geo.lift(rng.standard_normal(3))
        q_tilde = origin.q + 0.5 * rng.standard_normal(5)
        res = geo.project_position(q_tilde, origin, solver=solver)
        assert not res.failed
        assert res.iters == 1
        assert geo.constraint_norm(res.point) < 1e-9

    @pytest.mark.parametrize("solver", ["newton", "symmetric_newton"])
    def test_already_on_manifold_returns_unchanged(self, toy_geo, rng, solver):
        origin = toy_geo.lift(rng.standard_normal(2))
        res = toy_geo.project_position(origin.q, origin, solver=solver)
        assert not res.failed
        assert res.iters == 0
        assert np.array_equal(res.point.q, origin.q)

    def test_toy_tangent_perturbation_converges(self, rng):
        geo = LiftedGeometry(zoo.toy_loop_model(0.1))
        for _ in range(20):
            origin = geo.lift(rng.standard_normal(2))
            step = geo.project_momentum(rng.standard_normal(3), origin)
            step = 0.1 * step / np.linalg.norm(step)
            res = geo.project_position(origin.q + step, origin, solver="newton")
            assert not res.failed
            assert res.iters <= 10
            assert geo.constraint_norm(res.point) < 1e-9

    def test_solvers_agree_on_projected_point(self, rng):
        geo = LiftedGeometry(zoo.toy_loop_model(0.1))
        for _ in range(10):
            origin = geo.lift(rng.standard_normal(2))
            step = geo.project_momentum(rng.standard_normal(3), origin)
            q_tilde = origin.q + 0.1 * step / np.linalg.norm(step)
            res_n = geo.project_position(q_tilde, origin, solver="newton")
            res_s = geo.project_position(q_tilde, origin, solver="symmetric_newton")
            assert not res_n.failed and not res_s.failed
            assert np.allclose(res_n.point.q, res_s.point.q, atol=1e-8)

    def test_correction_lies_in_origin_normal_space(self, rng):
        geo = LiftedGeometry(zoo.toy_loop_model(0.1))
        origin = geo.lift(rng.standard_normal(2))
        step = geo.project_momentum(rng.standard_normal(3), origin)
        q_tilde = origin.q + 0.1 * step / np.linalg.norm(step)
        res = geo.project_position(q_tilde, origin, solver="newton")
        delta = q_tilde - res.point.q
        # residual must be reproducible from multipliers on the origin Jacobian
        jac = geo.constraint_jacobian(origin)
        lam, *_ = np.linalg.lstsq(jac.T, delta, rcond=None)
        assert np.allclose(jac.T @ lam, delta, atol=1e-8)

    def test_unreachable_target_flags_failure(self, toy_geo):
        origin = toy_geo.lift(np.array([0.0, 1.0]))
        # a huge displacement cannot be projected back within max_iter
        res = toy_geo.project_position(origin.q + np.array([50.0, 80.0, 0.0]), origin)
        assert res.failed
        assert res.point is None


def test_gram_auto_mode_dispatch(toy_model):
    geo = LiftedGeometry(toy_model)  # d_y=1 <= d_theta=2
    assert geo.gram(geo.point(np.zeros(3))).mode == "dense"
    over = zoo.linear_gaussian_model(
        np.ones((4, 2)), np.zeros(4), 1.0, np.zeros(4)
    )
    geo2 = LiftedGeometry(over)  # d_y=4 > d_theta=2
    assert geo2.gram(geo2.point(np.zeros(6))).mode == "woodbury"


def test_phase_state_holds_tangent_pair(toy_model, rng):
    from manifoldmc.geometry import PhaseState

    geo = LiftedGeometry(toy_model)
    pt = geo.lift(rng.standard_normal(2))
    p = geo.project_momentum(rng.standard_normal(3), pt)
    state = PhaseState(q=pt, p=p)
    assert geo.tangency_error(state.q, state.p) <= 1e-8 * (1 + np.max(np.abs(p)))


def test_substep_log_records_stages(toy_model, rng):
    from manifoldmc.integrators import constrained_step

    geo = LiftedGeometry(toy_model)
    pt = geo.lift(rng.standard_normal(2))
    p = geo.project_momentum(rng.standard_normal(3), pt)
    out = constrained_step(geo, pt, p, 0.1, record_substeps=True)
    assert not out.failed
    assert set(out.substep_log) == {
        "p_half_projected",
        "q1_unprojected",
        "p_half_recovered",
    }
    # the recovered half-step momentum reproduces the position update exactly
    assert np.allclose(pt.q + 0.1 * out.substep_log["p_half_recovered"], out.q1.q)
