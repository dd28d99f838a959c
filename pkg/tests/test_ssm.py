import numpy as np
import pytest

from manifoldmc import ssm as sm
from manifoldmc import zoo
from manifoldmc.exceptions import DomainError
from manifoldmc.ssm import BlockTridiagonalGram, SsmGeometry


def random_btd(rng, t_steps, d, p):
    """Random SPD block-tridiagonal-plus-low-rank instance."""
    diag = rng.standard_normal((t_steps, d, d))
    diag = np.einsum("tik,tjk->tij", diag, diag) + 3.0 * d * np.eye(d)
    sub = 0.3 * rng.standard_normal((max(t_steps - 1, 0), d, d))
    u = rng.standard_normal((t_steps * d, p))
    return BlockTridiagonalGram(diag, sub, u)


class TestBlockTridiagonal:
    def test_identity_solve(self):
        gram = BlockTridiagonalGram(np.tile(np.eye(2), (5, 1, 1)), None, None)
        b = np.arange(10.0)
        assert np.allclose(gram.solve(b), b)
        assert gram.logdet() == pytest.approx(0.0)

    def test_diagonal_logdet(self, rng):
        entries = rng.uniform(0.5, 3.0, 7)
        gram = BlockTridiagonalGram(entries[:, None, None], None, None)
        assert gram.logdet() == pytest.approx(np.sum(np.log(entries)))

    @pytest.mark.parametrize("d,p", [(1, 0), (1, 2), (2, 0), (2, 3), (3, 2)])
    def test_solve_and_logdet_match_dense(self, rng, d, p):
        for _ in range(5):
            gram = random_btd(rng, 6, d, p)
            dense = gram.as_dense()
            b = rng.standard_normal(gram.dim)
            assert np.allclose(gram.solve(b), np.linalg.solve(dense, b), atol=1e-8)
            sign, logdet = np.linalg.slogdet(dense)
            assert sign > 0
            assert gram.logdet() == pytest.approx(logdet, abs=1e-8)

    def test_constructed_rhs_recovers_ones(self, rng):
        gram = random_btd(rng, 6, 2, 1)
        ones = np.ones(gram.dim)
        b = gram.as_dense() @ ones
        assert np.allclose(gram.solve(b), ones, atol=1e-8)

    def test_matrix_rhs(self, rng):
        gram = random_btd(rng, 5, 2, 2)
        b = rng.standard_normal((gram.dim, 3))
        dense = gram.as_dense()
        assert np.allclose(gram.solve(b), np.linalg.solve(dense, b), atol=1e-8)

    @pytest.mark.parametrize("d,p", [(1, 0), (1, 2), (2, 2), (3, 1)])
    def test_band_inverse_matches_dense(self, rng, d, p):
        gram = random_btd(rng, 6, d, p)
        inv = np.linalg.inv(gram.as_dense())
        inv_diag, inv_sub = gram.band_inverse()
        for k in range(6):
            assert np.allclose(
                inv_diag[k], inv[k * d : (k + 1) * d, k * d : (k + 1) * d], atol=1e-8
            )
        for k in range(5):
            assert np.allclose(
                inv_sub[k],
                inv[(k + 1) * d : (k + 2) * d, k * d : (k + 1) * d],
                atol=1e-8,
            )

    def test_inv_u_matches_dense(self, rng):
        gram = random_btd(rng, 5, 2, 3)
        expected = np.linalg.solve(gram.as_dense(), gram.u)
        assert np.allclose(gram.inv_u(), expected, atol=1e-8)

    def test_non_pd_core_raises(self):
        diag = -np.ones((3, 1, 1))
        with pytest.raises(Exception):
            BlockTridiagonalGram(diag, None, None).logdet()


@pytest.fixture(scope="module")
def ssm_instance():
    dataset = zoo.simulate_nonlinear_ssm(t_steps=5, sigma=0.3, seed=42)
    spec = zoo.nonlinear_ssm_spec(dataset.observed)
    return dataset, spec


def on_manifold_point(spec, rng):
    theta = spec.prior_sample(rng)
    phi, nu = theta[:4], theta[4:]
    eta = spec.initial_eta(phi, nu)
    return phi, nu, eta


class TestSsmConstraint:
    def test_exact_simulation_zero_residual(self, ssm_instance):
        dataset, spec = ssm_instance
        truth = dataset.truth
        phi = np.array(
            [
                truth["mu"],
                np.log(truth["gamma"]),
                np.arctanh(truth["rho"]),
                np.log(dataset.sigma),
            ]
        )
        # recover the innovations and noises that generated the data
        x = truth["x"]
        rho, gamma = truth["rho"], truth["gamma"]
        nu = np.empty(5)
        nu[0] = (x[0] - truth["mu"]) * np.sqrt(1 - rho**2) / gamma
        nu[1:] = (x[1:] - truth["mu"] - rho * (x[:-1] - truth["mu"])) / gamma
        eta = (dataset.observed - np.exp(x)) / dataset.sigma
        resid = sm.ssm_constraint(spec, phi, nu, eta)
        assert np.max(np.abs(resid)) < 1e-12

    def test_initial_eta_lands_on_manifold(self, ssm_instance, rng):
        _, spec = ssm_instance
        for _ in range(10):
            phi, nu, eta = on_manifold_point(spec, rng)
            resid = sm.ssm_constraint(spec, phi, nu, eta)
            assert np.max(np.abs(resid)) < 1e-10

    def test_markov_locality_of_eta_perturbation(self, ssm_instance, rng):
        _, spec = ssm_instance
        phi, nu, eta = on_manifold_point(spec, rng)
        base = sm.ssm_constraint(spec, phi, nu, eta)
        bump = eta.copy()
        bump[2] += 1e-3
        moved = sm.ssm_constraint(spec, phi, nu, bump) - base
        assert abs(moved[2]) > 0 and abs(moved[3]) > 0
        assert np.allclose(moved[[0, 1, 4]], 0.0)

    def test_infeasible_point_raises_domain_error(self, ssm_instance):
        _, spec = ssm_instance
        phi = np.array([0.0, 0.0, 0.0, 3.0])  # sigma = e^3, easily overshoots
        nu = np.zeros(5)
        eta = 100.0 * np.ones(5)
        with pytest.raises(DomainError):
            sm.ssm_constraint(spec, phi, nu, eta)


class TestSsmBlocks:
    def test_vectorized_matches_generic_ad(self, ssm_instance, rng):
        _, spec = ssm_instance
        for _ in range(5):
            phi, nu, eta = on_manifold_point(spec, rng)
            fast = spec.vectorized.blocks(phi, nu, eta)
            slow, slow_hess = sm._generic_blocks(spec, phi, nu, eta)
            assert np.allclose(fast.resid, slow.resid, atol=1e-10)
            assert np.allclose(fast.u, slow.u, atol=1e-10)
            assert np.allclose(fast.d_nu, slow.d_nu, atol=1e-10)
            assert np.allclose(fast.a, slow.a, atol=1e-10)
            assert np.allclose(fast.b, slow.b, atol=1e-10)
            fast_hess = spec.vectorized.hessians(phi, nu, eta)
            assert np.allclose(fast_hess, slow_hess, atol=1e-9)

    def test_structured_gram_matches_dense_product(self, ssm_instance, rng):
        _, spec = ssm_instance
        phi, nu, eta = on_manifold_point(spec, rng)
        gram = sm.build_structured_gram(spec, phi, nu, eta)
        blocks = sm.evaluate_blocks(spec, phi, nu, eta)
        jac = sm.dense_jacobian_from_blocks(blocks)
        assert np.allclose(gram.as_dense(), jac @ jac.T, atol=1e-10)

    def test_bandwidth_outside_low_rank_is_zero(self, ssm_instance, rng):
        _, spec = ssm_instance
        phi, nu, eta = on_manifold_point(spec, rng)
        gram = sm.build_structured_gram(spec, phi, nu, eta)
        banded = gram.as_dense() - gram.u @ gram.u.T
        t = spec.n_steps
        for s in range(t):
            for u in range(t):
                if abs(s - u) >= 2:
                    assert banded[s, u] == pytest.approx(0.0, abs=1e-14)

    def test_zero_parameter_gram_is_purely_tridiagonal(self, rng):
        gram = random_btd(rng, 4, 2, 0)
        assert gram.u.shape[1] == 0
        assert np.allclose(gram.solve(np.ones(8)), gram.core_solve(np.ones(8)))


class TestSsmGeometry:
    def test_potential_and_grad_match_dense_backend(self, ssm_instance, rng):
        _, spec = ssm_instance
        structured = SsmGeometry(spec, structured=True)
        dense = SsmGeometry(spec, structured=False)
        for _ in range(5):
            phi, nu, eta = on_manifold_point(spec, rng)
            q = np.concatenate([phi, nu, eta])
            ps, pd_ = structured.point(q), dense.point(q)
            assert structured.potential(ps) == pytest.approx(
                dense.potential(pd_), abs=1e-9
            )
            assert np.allclose(
                structured.grad_potential(ps), dense.grad_potential(pd_), atol=1e-8
            )

    def test_grad_matches_finite_differences(self, ssm_instance):
        _, spec = ssm_instance
        geo = SsmGeometry(spec, structured=True)
        rng = np.random.default_rng(3)
        phi, nu, eta = on_manifold_point(spec, rng)
        q = np.concatenate([phi, nu, eta])
        grad = geo.grad_potential(geo.point(q))
        from manifoldmc import autodiff as ad

        fd = ad.central_difference_jacobian(
            lambda v: np.array([geo.potential(geo.point(v))]), q
        )[0]
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-6)

    def test_momentum_projection_tangency(self, ssm_instance, rng):
        _, spec = ssm_instance
        geo = SsmGeometry(spec, structured=True)
        pt = geo.lift(spec.prior_sample(rng)[: geo.dim_theta])
        p = geo.project_momentum(rng.standard_normal(geo.dim_x), pt)
        assert geo.tangency_error(pt, p) < 1e-8 * (1 + np.max(np.abs(p)))

    @pytest.mark.parametrize("solver", ["newton", "symmetric_newton"])
    def test_position_projection(self, ssm_instance, rng, solver):
        _, spec = ssm_instance
        geo = SsmGeometry(spec, structured=True)
        pt = geo.lift(spec.prior_sample(rng)[: geo.dim_theta])
        p = geo.project_momentum(rng.standard_normal(geo.dim_x), pt)
        step = 0.05 * p / max(np.linalg.norm(p), 1.0)
        res = geo.project_position(pt.q + step, pt, solver=solver)
        assert not res.failed
        assert geo.constraint_norm(res.point) < 1e-9

    def test_structured_and_dense_chains_identical(self, ssm_instance):
        from manifoldmc.samplers import ChmcConfig, run_chain

        dataset = zoo.simulate_nonlinear_ssm(t_steps=8, sigma=0.3, seed=7)
        spec = zoo.nonlinear_ssm_spec(dataset.observed)
        cfg = ChmcConfig(eps=0.2, n_steps=3, solver="symmetric_newton")
        traces = []
        for structured in (True, False):
            geo = SsmGeometry(spec, structured=structured)
            traces.append(
                run_chain(
                    None,
                    "chmc",
                    seed=99,
                    n_warmup=0,
                    n_main=40,
                    chmc=cfg,
                    geometry=geo,
                    adapt=False,
                )
            )
        assert np.allclose(traces[0].thetas, traces[1].thetas, atol=1e-8)
        assert np.array_equal(traces[0].accepted, traces[1].accepted)


class TestSsmHmcTarget:
    def test_gradient_matches_finite_differences(self, ssm_instance, rng):
        dataset, _ = ssm_instance
        target = zoo.SsmHmcTarget(dataset.observed)
        from manifoldmc import autodiff as ad

        for _ in range(5):
            theta = target.prior_sample(rng)
            fd = ad.central_difference_jacobian(
                lambda v: np.array([target.potential(v)]), theta
            )[0]
            assert np.allclose(target.grad(theta), fd, rtol=1e-5, atol=1e-5)

    def test_potential_matches_direct_evaluation(self, ssm_instance, rng):
        dataset, _ = ssm_instance
        target = zoo.SsmHmcTarget(dataset.observed)
        theta = target.prior_sample(rng)
        phi, nu = theta[:4], theta[4:]
        x = zoo._ssm_states(phi, nu)
        sigma = np.exp(phi[3])
        direct = (
            zoo._ssm_prior_potential_phi(phi)
            + 0.5 * nu @ nu
            + 0.5 * np.sum((dataset.observed - np.exp(x)) ** 2) / sigma**2
            + 5 * np.log(sigma)
        )
        assert target.potential(theta) == pytest.approx(float(direct))


@pytest.mark.slow
def test_btd_solve_wall_clock_linear_in_t(rng):
    """Wall clock of btd_solve fits a linear model in T with R^2 >= 0.98."""
    import time

    sizes = [256, 512, 1024, 2048]
    times = []
    for t_steps in sizes:
        gram = random_btd(rng, t_steps, 2, 2)
        b = rng.standard_normal(gram.dim)
        gram.solve(b)  # factor once before timing
        reps = []
        for _ in range(7):
            fresh = BlockTridiagonalGram(gram.diag, gram.sub, gram.u)
            start = time.perf_counter()
            fresh.solve(b)
            reps.append(time.perf_counter() - start)
        times.append(np.median(reps))
    x = np.array(sizes, dtype=float)
    y = np.array(times)
    coeffs = np.polyfit(x, y, 1)
    fitted = np.polyval(coeffs, x)
    ss_res = np.sum((y - fitted) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - ss_res / ss_tot
    assert r_squared >= 0.98, f"R^2={r_squared:.4f}, times={times}"
