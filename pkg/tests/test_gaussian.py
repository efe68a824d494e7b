"""Closed-form Gaussian solutions against hand-derived oracles.

The reference instance throughout is the 2x2 joint covariance
[[1.5, 1], [1, 1.5]] (scalar u and v blocks), for which everything is
computable by hand:

    true conditional gain   1/1.5           = 2/3
    true conditional cov    1.5 - 1/1.5     = 5/6
    cond-loss minimizer     (2/3)/1.5       = 4/9
    quadratic minimizer     a = (6/5)(2/3)  = 4/5,  b = 6/5 - 2/3 = 8/15
    whitened correlation    1/1.5           = 2/3
    shrinkage               h(2/3)          = 1/2
    joint-loss minimizer    (1/2)/1.5       = 1/3
    model-u marginals       cond 2.7, joint 2.0 (true variance 1.5)
"""

import numpy as np
import pytest

from tiltlab import gaussian, linalg
from tiltlab.errors import DivergentNormalizer, NotPositiveDefinite, SolverDidNotConverge
from tiltlab.rng import SeededRng


def reference():
    return gaussian.BlockGaussian([[1.5]], [[1.0]], [[1.5]])


def random_blocks(seed, n_x=None, n_y=None):
    rng = SeededRng(seed)
    n_x = n_x or int(rng.split(0).integers(1, 5))
    n_y = n_y or int(rng.split(1).integers(1, 5))
    d = n_x + n_y
    base = rng.split(2).standard_normal((d, d + 3))
    cov = base @ base.T / (d + 3) + 0.3 * np.eye(d)
    return gaussian.BlockGaussian(cov[:n_x, :n_x], cov[:n_x, n_x:], cov[n_x:, n_x:])


class TestBlockGaussian:
    def test_joint_assembly(self):
        g = random_blocks(0, 2, 3)
        j = g.joint()
        np.testing.assert_array_equal(j[:2, :2], g.c_uu)
        np.testing.assert_array_equal(j[:2, 2:], g.c_uv)
        np.testing.assert_array_equal(j[2:, 2:], g.c_vv)

    def test_rejects_non_pd_joint(self):
        # off-diagonal too large for the marginals
        with pytest.raises(NotPositiveDefinite):
            gaussian.BlockGaussian([[1.0]], [[1.1]], [[1.0]])

    def test_rejects_asymmetric_marginal(self):
        with pytest.raises(ValueError):
            gaussian.BlockGaussian([[1.0, 0.2], [0.0, 1.0]], np.zeros((2, 1)), [[1.0]])

    def test_swapped(self):
        g = random_blocks(1, 2, 3)
        s = g.swapped()
        np.testing.assert_array_equal(s.c_uu, g.c_vv)
        np.testing.assert_array_equal(s.c_uv, g.c_vu)


class TestTrueConditional:
    def test_reference_values(self):
        cond = gaussian.conditional_u_given_v(reference())
        assert abs(cond.gain[0, 0] - 2.0 / 3.0) < 1e-14
        assert abs(cond.cov[0, 0] - 5.0 / 6.0) < 1e-14

    def test_schur_complement_pd(self):
        for seed in range(8):
            g = random_blocks(seed)
            cond = gaussian.conditional_u_given_v(g)
            linalg.cholesky_pd(cond.cov)  # must not raise

    def test_v_given_u_is_swap(self):
        g = random_blocks(3, 3, 2)
        a = gaussian.conditional_v_given_u(g)
        b = gaussian.conditional_u_given_v(g.swapped())
        np.testing.assert_array_equal(a.gain, b.gain)
        np.testing.assert_array_equal(a.cov, b.cov)

    def test_law_of_total_variance(self):
        g = random_blocks(4, 2, 2)
        cond = gaussian.conditional_u_given_v(g)
        total = cond.cov + cond.gain @ g.c_vv @ cond.gain.T
        np.testing.assert_allclose(total, g.c_uu, atol=1e-12)


class TestCondLoss:
    def test_reference_minimum_value(self):
        g = reference()
        a = gaussian.minimizer_cond(g)
        assert abs(a[0, 0] - 4.0 / 9.0) < 1e-14
        assert abs(gaussian.cond_loss_closed(a, g) + 2.0 / 9.0) < 1e-14

    def test_gradient_vanishes_at_minimizer(self):
        g = random_blocks(5, 3, 2)
        a = gaussian.minimizer_cond(g)
        step = 1e-6
        rng = SeededRng(50)
        for probe in range(5):
            d = rng.split(probe).standard_normal(a.shape)
            d /= np.linalg.norm(d)
            fd = (
                gaussian.cond_loss_closed(a + step * d, g)
                - gaussian.cond_loss_closed(a - step * d, g)
            ) / (2 * step)
            assert abs(fd) < 1e-8

    def test_minimizer_beats_perturbations(self):
        g = random_blocks(6, 2, 4)
        a = gaussian.minimizer_cond(g)
        best = gaussian.cond_loss_closed(a, g)
        rng = SeededRng(51)
        for probe in range(20):
            trial = a + 0.1 * rng.split(probe).standard_normal(a.shape)
            assert gaussian.cond_loss_closed(trial, g) >= best - 1e-12

    def test_rank_constrained_on_whitened_svd(self):
        g = random_blocks(7, 4, 4)
        full = gaussian.minimizer_cond(g)
        for r in range(5):
            a_r = gaussian.minimizer_cond(g, r=r)
            assert np.linalg.matrix_rank(a_r, tol=1e-10) <= r
            # best rank-r approximation in the whitened metric
            w = linalg.sym_sqrt(g.c_uu) @ full @ linalg.sym_sqrt(g.c_vv)
            w_r = linalg.sym_sqrt(g.c_uu) @ a_r @ linalg.sym_sqrt(g.c_vv)
            np.testing.assert_allclose(w_r, linalg.rank_truncate(w, r), atol=1e-10)

    def test_rank_cap_validation(self):
        g = random_blocks(8, 2, 3)
        with pytest.raises(ValueError):
            gaussian.minimizer_cond(g, r=3)

    def test_shape_mismatch(self):
        g = random_blocks(9, 2, 3)
        with pytest.raises(ValueError):
            gaussian.cond_loss_closed(np.zeros((3, 2)), g)


class TestJointLoss:
    def test_reference_minimum(self):
        g = reference()
        a = gaussian.minimizer_joint(g)
        assert abs(a[0, 0] - 1.0 / 3.0) < 1e-10
        want = -1.0 / 3.0 - 0.5 * np.log(0.75)
        assert abs(gaussian.joint_loss_closed(a, g) - want) < 1e-12

    def test_agrees_with_direct_determinant(self):
        # same quantity through the unsymmetrized determinant
        for seed in range(6):
            g = random_blocks(seed + 10)
            a = 0.5 * gaussian.minimizer_joint(g)
            direct = -np.trace(a @ g.c_vu) - 0.5 * np.log(
                np.linalg.det(np.eye(g.n_y) - g.c_vv @ a.T @ g.c_uu @ a)
            )
            assert abs(gaussian.joint_loss_closed(a, g) - direct) < 1e-10

    def test_divergent_normalizer(self):
        g = reference()
        # spectral norm of the whitened tilt exceeds 1: not integrable
        with pytest.raises(DivergentNormalizer):
            gaussian.joint_loss_closed(np.array([[0.7]]), g)

    def test_gradient_vanishes_at_minimizer(self):
        g = random_blocks(11, 2, 2)
        a = gaussian.minimizer_joint(g)
        step = 1e-6
        rng = SeededRng(52)
        for probe in range(5):
            d = rng.split(probe).standard_normal(a.shape)
            d /= np.linalg.norm(d)
            fd = (
                gaussian.joint_loss_closed(a + step * d, g)
                - gaussian.joint_loss_closed(a - step * d, g)
            ) / (2 * step)
            assert abs(fd) < 1e-7

    def test_rank_truncation_keeps_leading_directions(self):
        g = random_blocks(12, 4, 4)
        full = gaussian.minimizer_joint(g)
        w_full = linalg.sym_sqrt(g.c_uu) @ full @ linalg.sym_sqrt(g.c_vv)
        for r in range(4):
            a_r = gaussian.minimizer_joint(g, r=r)
            w_r = linalg.sym_sqrt(g.c_uu) @ a_r @ linalg.sym_sqrt(g.c_vv)
            np.testing.assert_allclose(w_r, linalg.rank_truncate(w_full, r), atol=1e-9)


class TestShrinkage:
    def test_fixed_values(self):
        assert gaussian.shrinkage_h(0.0) == 0.0
        assert abs(gaussian.shrinkage_h(2.0 / 3.0) - 0.5) < 1e-15
        assert abs(gaussian.shrinkage_h(1.0) - (np.sqrt(5.0) - 1.0) / 2.0) < 1e-15

    def test_defining_equation(self):
        # h solves h^2 s + h - s = 0 on (0, 1]
        for s in np.linspace(1e-3, 1.0, 37):
            h = gaussian.shrinkage_h(s)
            assert abs(h * h * s + h - s) < 1e-13

    def test_monotone_and_contractive(self):
        grid = np.linspace(0.0, 1.0, 101)
        vals = gaussian.shrinkage_h(grid)
        assert np.all(np.diff(vals) > 0)
        assert np.all(vals[1:] < grid[1:])

    def test_domain_rejection(self):
        with pytest.raises(ValueError):
            gaussian.shrinkage_h(1.5)
        with pytest.raises(ValueError):
            gaussian.shrinkage_h(-0.2)

    def test_array_shape_preserved(self):
        out = gaussian.shrinkage_h(np.array([[0.1, 0.5], [0.9, 0.0]]))
        assert out.shape == (2, 2)


class TestQuadraticMinimizer:
    def test_reference_values(self):
        q = gaussian.minimizer_quadratic_onesided(reference())
        assert abs(q.a[0, 0] - 0.8) < 1e-10
        assert abs(q.b[0, 0] - 8.0 / 15.0) < 1e-10
        assert np.all(q.c == 0.0)

    def test_unconstrained_closed_form_random(self):
        for seed in range(6):
            g = random_blocks(seed + 20)
            q = gaussian.minimizer_quadratic_onesided(g)
            cov_ugv = gaussian.conditional_u_given_v(g).cov
            prec = linalg.inv_pd(cov_ugv)
            a_want = prec @ gaussian.conditional_u_given_v(g).gain
            b_want = prec - linalg.inv_pd(g.c_uu)
            np.testing.assert_allclose(q.a, a_want, atol=1e-7)
            np.testing.assert_allclose(q.b, b_want, atol=1e-7)

    def test_model_reproduces_true_conditional(self):
        g = random_blocks(21, 3, 2)
        q = gaussian.minimizer_quadratic_onesided(g)
        model = gaussian.model_conditional(q, "u_given_v", g)
        true = gaussian.conditional_u_given_v(g)
        np.testing.assert_allclose(model.gain, true.gain, atol=1e-7)
        np.testing.assert_allclose(model.cov, true.cov, atol=1e-7)

    def test_full_rank_budget_matches_unconstrained(self):
        g = random_blocks(22, 3, 3)
        q_full = gaussian.minimizer_quadratic_onesided(g)
        q_r = gaussian.minimizer_quadratic_onesided(g, r=3)
        np.testing.assert_allclose(q_r.a, q_full.a, atol=1e-6)
        np.testing.assert_allclose(q_r.b, q_full.b, atol=1e-6)

    def test_rank_constrained_b_has_low_rank(self):
        g = random_blocks(23, 4, 3)
        q = gaussian.minimizer_quadratic_onesided(g, r=2)
        assert np.linalg.matrix_rank(q.b, tol=1e-8) <= 2
        assert np.linalg.matrix_rank(q.a, tol=1e-8) <= 2
        eig = np.linalg.eigvalsh(q.b)
        assert eig.min() > -1e-9  # PSD

    @staticmethod
    def population_loss(a, b, g):
        """One-sided conditional loss over the quadratic family, derived
        independently from the Gaussian integral of the normalizer:

            L = (1/2) Tr(b C_uu) - Tr(a C_vu) - (1/2) log det(C_uu M)
                + (1/2) Tr(a^T M^{-1} a C_vv),    M = b + C_uu^{-1}.

        At b = 0 this collapses to cond_loss_closed exactly.
        """
        m = b + linalg.inv_pd(g.c_uu)
        m = 0.5 * (m + m.T)
        return (
            0.5 * np.trace(b @ g.c_uu)
            - np.trace(a @ g.c_vu)
            - 0.5 * (linalg.logdet_pd(g.c_uu) + linalg.logdet_pd(m))
            + 0.5 * np.trace(a.T @ linalg.solve_pd(m, a) @ g.c_vv)
        )

    def test_population_loss_extends_cond_loss(self):
        g = random_blocks(24, 3, 2)
        a = 0.3 * SeededRng(24).standard_normal((3, 2))
        zero_b = np.zeros((3, 3))
        assert abs(
            self.population_loss(a, zero_b, g) - gaussian.cond_loss_closed(a, g)
        ) < 1e-12

    def test_unconstrained_minimizer_is_stationary(self):
        g = random_blocks(24, 4, 3)
        q = gaussian.minimizer_quadratic_onesided(g)
        rng = SeededRng(53)
        step = 1e-5
        for probe in range(6):
            da = rng.split(probe, 0).standard_normal(q.a.shape)
            db = rng.split(probe, 1).standard_normal(q.b.shape)
            db = 0.5 * (db + db.T)
            scale = np.sqrt(np.sum(da * da) + np.sum(db * db))
            da, db = da / scale, db / scale
            fd = (
                self.population_loss(q.a + step * da, q.b + step * db, g)
                - self.population_loss(q.a - step * da, q.b - step * db, g)
            ) / (2 * step)
            assert abs(fd) < 1e-7

    def test_rank_solver_is_stationary_on_the_factored_manifold(self):
        # perturb (a, b) through rank-r factors a = l^T m, b = f^T f; the
        # solver's output must be a stationary point of the population loss
        # along every such feasible direction
        g = random_blocks(24, 4, 3)
        r = 2
        q = gaussian.minimizer_quadratic_onesided(g, r=r)
        w_b, q_b = np.linalg.eigh(q.b)
        order = np.argsort(w_b)[::-1][:r]
        f0 = np.sqrt(np.clip(w_b[order], 0.0, None))[:, None] * q_b[:, order].T
        ua, sa, vta = np.linalg.svd(q.a)
        l0 = (ua[:, :r] * np.sqrt(sa[:r])).T
        m0 = np.sqrt(sa[:r])[:, None] * vta[:r, :]
        np.testing.assert_allclose(f0.T @ f0, q.b, atol=1e-9)
        np.testing.assert_allclose(l0.T @ m0, q.a, atol=1e-9)

        rng = SeededRng(54)
        step = 1e-5
        for probe in range(6):
            df = rng.split(probe, 0).standard_normal(f0.shape)
            dl = rng.split(probe, 1).standard_normal(l0.shape)
            dm = rng.split(probe, 2).standard_normal(m0.shape)
            scale = np.sqrt(sum(np.sum(d * d) for d in (df, dl, dm)))
            df, dl, dm = df / scale, dl / scale, dm / scale

            def at(t, df=df, dl=dl, dm=dm):
                f = f0 + t * df
                l = l0 + t * dl
                m = m0 + t * dm
                return self.population_loss(l.T @ m, f.T @ f, g)

            fd = (at(step) - at(-step)) / (2 * step)
            assert abs(fd) < 1e-6

    def test_rank_solver_value_ordering(self):
        g = random_blocks(24, 4, 3)
        best = self.population_loss(
            *(lambda q: (q.a, q.b))(gaussian.minimizer_quadratic_onesided(g)), g
        )
        prev = np.inf
        for r in (1, 2, 3):
            q = gaussian.minimizer_quadratic_onesided(g, r=r)
            val = self.population_loss(q.a, q.b, g)
            assert val >= best - 1e-9
            assert val <= prev + 1e-9
            prev = val
        # full rank budget recovers the unconstrained optimum
        assert abs(prev - best) < 1e-6

    def test_solver_iteration_cap(self):
        g = random_blocks(25, 4, 4)
        tight = gaussian.SolverConfig(max_iters=1, grad_tol=1e-16)
        with pytest.raises(SolverDidNotConverge):
            gaussian.minimizer_quadratic_onesided(g, r=2, solver=tight)

    def test_rank_zero(self):
        g = random_blocks(26, 2, 2)
        q = gaussian.minimizer_quadratic_onesided(g, r=0)
        assert np.all(q.b == 0.0)


class TestModelDistributions:
    def test_cosine_model_conditional_shapes(self):
        g = random_blocks(30, 2, 3)
        a = 0.1 * SeededRng(30).standard_normal((2, 3))
        ugv = gaussian.model_conditional(gaussian.CosineLinear(a), "u_given_v", g)
        np.testing.assert_allclose(ugv.gain, g.c_uu @ a, atol=1e-12)
        np.testing.assert_allclose(ugv.cov, g.c_uu, atol=1e-12)
        vgu = gaussian.model_conditional(gaussian.CosineLinear(a), "v_given_u", g)
        np.testing.assert_allclose(vgu.gain, g.c_vv @ a.T, atol=1e-12)
        np.testing.assert_allclose(vgu.cov, g.c_vv, atol=1e-12)

    def test_unknown_side(self):
        g = reference()
        with pytest.raises(ValueError):
            gaussian.model_conditional(gaussian.CosineLinear(np.eye(1)), "sideways", g)

    def test_marginal_reference_values(self):
        g = reference()
        m_cond = gaussian.model_marginal_u(gaussian.minimizer_cond(g), g)
        m_joint = gaussian.model_marginal_u(gaussian.minimizer_joint(g), g)
        assert abs(m_cond[0, 0] - 2.7) < 1e-9
        assert abs(m_joint[0, 0] - 2.0) < 1e-9

    def test_marginal_at_zero_tilt_is_c_uu(self):
        g = random_blocks(31, 3, 2)
        m = gaussian.model_marginal_u(np.zeros((3, 2)), g)
        np.testing.assert_allclose(m, g.c_uu, atol=1e-12)

    def test_model_joint_u_block_is_model_marginal(self):
        g = random_blocks(32, 2, 2)
        a = 0.2 * SeededRng(32).standard_normal((2, 2))
        joint = gaussian.model_joint(gaussian.CosineLinear(a), g)
        np.testing.assert_allclose(joint[:2, :2], gaussian.model_marginal_u(a, g), atol=1e-10)

    def test_model_joint_pd(self):
        g = random_blocks(33, 2, 3)
        a = 0.1 * SeededRng(33).standard_normal((2, 3))
        linalg.cholesky_pd(gaussian.model_joint(gaussian.CosineLinear(a), g))

    def test_quadratic_model_joint_at_minimizer_matches_conditional(self):
        # the u|v conditional read off the model joint equals the model's map
        g = random_blocks(34, 2, 2)
        q = gaussian.minimizer_quadratic_onesided(g)
        joint = gaussian.model_joint(q, g)
        gj = gaussian.BlockGaussian(joint[:2, :2], joint[:2, 2:], joint[2:, 2:])
        cond = gaussian.conditional_u_given_v(gj)
        model = gaussian.model_conditional(q, "u_given_v", g)
        np.testing.assert_allclose(cond.gain, model.gain, atol=1e-6)
        np.testing.assert_allclose(cond.cov, model.cov, atol=1e-6)


class TestKlGaussians:
    def test_zero_iff_equal(self):
        m = np.array([0.3, -1.0])
        c = np.array([[1.2, 0.3], [0.3, 0.9]])
        assert abs(gaussian.kl_gaussians(m, c, m, c)) < 1e-14

    def test_hand_computed_1d(self):
        # KL(N(1,2) || N(0,1)) = (2 - 1 + 0 - log 2 + 1) / 2 = 1 - log(2)/2
        val = gaussian.kl_gaussians([1.0], [[2.0]], [0.0], [[1.0]])
        assert abs(val - (1.0 - 0.5 * np.log(2.0))) < 1e-14

    def test_nonnegative(self):
        rng = SeededRng(40)
        for seed in range(10):
            c1 = rng.split(seed, 0).standard_normal((2, 4))
            c2 = rng.split(seed, 1).standard_normal((2, 4))
            m1 = rng.split(seed, 2).standard_normal(2)
            m2 = rng.split(seed, 3).standard_normal(2)
            kl = gaussian.kl_gaussians(
                m1, c1 @ c1.T / 4 + 0.2 * np.eye(2), m2, c2 @ c2.T / 4 + 0.2 * np.eye(2)
            )
            assert kl >= 0.0

    def test_invariant_under_rotation(self):
        rng = SeededRng(41)
        q, _ = np.linalg.qr(rng.split(0).standard_normal((3, 3)))
        m1 = rng.split(1).standard_normal(3)
        m2 = rng.split(2).standard_normal(3)
        b1 = rng.split(3).standard_normal((3, 5))
        b2 = rng.split(4).standard_normal((3, 5))
        c1 = b1 @ b1.T / 5 + 0.3 * np.eye(3)
        c2 = b2 @ b2.T / 5 + 0.3 * np.eye(3)
        a = gaussian.kl_gaussians(m1, c1, m2, c2)
        b = gaussian.kl_gaussians(q @ m1, q @ c1 @ q.T, q @ m2, q @ c2 @ q.T)
        assert abs(a - b) < 1e-10


class TestExpQuadraticExpectation:
    def test_unit_at_zero_tilt(self):
        lam = np.array([[1.3, 0.2], [0.2, 0.8]])
        val = gaussian.exp_quadratic_expectation([0.4, -0.1], lam, np.zeros((2, 2)), np.zeros(2))
        assert abs(val - 1.0) < 1e-13

    def test_linear_tilt_is_mgf(self):
        # with b = 0 the integral is the Gaussian moment generating function
        rng = SeededRng(42)
        lam = np.array([[1.1, -0.3], [-0.3, 0.7]])
        m = np.array([0.5, -0.2])
        for seed in range(5):
            c = rng.split(seed).standard_normal(2)
            val = gaussian.exp_quadratic_expectation(m, lam, np.zeros((2, 2)), c)
            want = np.exp(c @ m + 0.5 * c @ lam @ c)
            assert abs(val - want) < 1e-12 * abs(want)

    def test_1d_pure_quadratic(self):
        # E exp(x^2/4) under N(0,1): 1/sqrt(1 - 1/2) = sqrt(2)
        val = gaussian.exp_quadratic_expectation([0.0], [[1.0]], [[0.5]], [0.0])
        assert abs(val - np.sqrt(2.0)) < 1e-13

    def test_divergent_tilt_rejected(self):
        with pytest.raises(DivergentNormalizer):
            gaussian.exp_quadratic_expectation([0.0], [[1.0]], [[1.5]], [0.0])


class TestRecoverEncoders:
    def test_round_trip(self):
        rng = SeededRng(43)
        base = rng.split(0).standard_normal((3, 6))
        b = base @ base.T / 6 + 0.4 * np.eye(3)
        a = rng.split(1).standard_normal((3, 5))
        q = gaussian.QuadraticTiltingParams(a=a, b=b, c=np.zeros((5, 5)))
        g_mat, h_mat = gaussian.recover_encoders(q)
        np.testing.assert_allclose(g_mat.T @ g_mat, b, atol=1e-10)
        np.testing.assert_allclose(g_mat.T @ h_mat, a, atol=1e-10)

    def test_wide_requirement(self):
        # u dimension may not exceed v dimension for an exact factorization
        b = np.eye(3)
        a = np.ones((3, 2))
        q = gaussian.QuadraticTiltingParams(a=a, b=b, c=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            gaussian.recover_encoders(q)


class TestEmpiricalBlocks:
    def test_consistency(self):
        from tiltlab import datagen

        g = random_blocks(44, 2, 2)
        data = datagen.sample_block_gaussian(g, 60_000, SeededRng(44))
        emp = gaussian.empirical_block_gaussian(data)
        np.testing.assert_allclose(emp.c_uu, g.c_uu, rtol=0.05, atol=0.02)
        np.testing.assert_allclose(emp.c_uv, g.c_uv, rtol=0.05, atol=0.02)
        np.testing.assert_allclose(emp.c_vv, g.c_vv, rtol=0.05, atol=0.02)

    def test_tuple_input(self):
        rng = SeededRng(45)
        u = rng.split(0).standard_normal((100, 2))
        v = rng.split(1).standard_normal((100, 3))
        emp = gaussian.empirical_block_gaussian((u, v))
        assert emp.n_x == 2 and emp.n_y == 3

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            gaussian.empirical_block_gaussian(
                (np.zeros((3, 2)), np.zeros((3, 2)))
            )
