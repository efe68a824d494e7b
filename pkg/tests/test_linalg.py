import numpy as np
import pytest

from tiltlab import linalg
from tiltlab.errors import NotPositiveDefinite
from tiltlab.rng import SeededRng


def random_pd(n, seed, jitter=0.5):
    rng = SeededRng(seed)
    base = rng.standard_normal((n, n + 2))
    return base @ base.T / (n + 2) + jitter * np.eye(n)


class TestSymmetryChecks:
    def test_accepts_symmetric(self):
        m = random_pd(4, 0)
        out = linalg.check_symmetric(m)
        np.testing.assert_array_equal(out, out.T)

    def test_rejects_asymmetric(self):
        m = random_pd(3, 1)
        m[0, 1] += 1e-6
        with pytest.raises(ValueError):
            linalg.check_symmetric(m)

    def test_roundoff_asymmetry_passes_through(self):
        # within tolerance the input is returned as-is, not symmetrized
        m = random_pd(3, 2)
        m[0, 1] += 1e-15
        out = linalg.check_symmetric(m)
        np.testing.assert_array_equal(out, m)


class TestCholeskyAndSolve:
    def test_not_pd_raises(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky_pd(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_solve_matches_inv(self):
        m = random_pd(5, 3)
        b = SeededRng(4).standard_normal((5, 2))
        x = linalg.solve_pd(m, b)
        np.testing.assert_allclose(m @ x, b, atol=1e-12)

    def test_inv_pd(self):
        m = random_pd(4, 5)
        np.testing.assert_allclose(linalg.inv_pd(m) @ m, np.eye(4), atol=1e-11)

    def test_logdet_matches_slogdet(self):
        m = random_pd(6, 6)
        sign, ld = np.linalg.slogdet(m)
        assert sign > 0
        assert abs(linalg.logdet_pd(m) - ld) < 1e-11


class TestMatrixSqrt:
    def test_sqrt_squares_back(self):
        for seed in range(5):
            m = random_pd(4, seed)
            s = linalg.sym_sqrt(m)
            np.testing.assert_allclose(s @ s, m, atol=1e-11)
            np.testing.assert_array_equal(s, s.T)

    def test_inv_sqrt(self):
        m = random_pd(4, 7)
        r = linalg.inv_sym_sqrt(m)
        np.testing.assert_allclose(r @ m @ r, np.eye(4), atol=1e-11)

    def test_sqrt_of_identity(self):
        np.testing.assert_allclose(linalg.sym_sqrt(np.eye(3)), np.eye(3), atol=1e-14)


class TestSvdSigned:
    def test_reconstruction(self):
        m = SeededRng(8).standard_normal((4, 6))
        u, s, vt = linalg.svd_signed(m)
        np.testing.assert_allclose(u @ np.diag(s) @ vt, m, atol=1e-12)

    def test_sign_convention(self):
        # first significant entry of every left singular vector is nonnegative
        m = SeededRng(9).standard_normal((5, 5))
        u, s, vt = linalg.svd_signed(m)
        for j in range(u.shape[1]):
            col = u[:, j]
            lead = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
            assert lead > 0

    def test_deterministic_under_negation_ambiguity(self):
        m = SeededRng(10).standard_normal((4, 4))
        u1, s1, v1 = linalg.svd_signed(m)
        u2, s2, v2 = linalg.svd_signed(m.copy())
        np.testing.assert_array_equal(u1, u2)
        np.testing.assert_array_equal(v1, v2)


class TestRankTruncate:
    def test_truncation_is_best_in_frobenius(self):
        # Eckart-Young: compare against the partial SVD sum
        m = SeededRng(11).standard_normal((5, 4))
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        for r in range(5):
            want = (u[:, :r] * s[:r]) @ vt[:r]
            np.testing.assert_allclose(linalg.rank_truncate(m, r), want, atol=1e-12)

    def test_full_rank_is_identity(self):
        m = SeededRng(12).standard_normal((3, 5))
        np.testing.assert_allclose(linalg.rank_truncate(m, 3), m, atol=1e-12)

    def test_rank_zero(self):
        m = SeededRng(13).standard_normal((3, 3))
        assert np.all(linalg.rank_truncate(m, 0) == 0.0)

    def test_negative_rank_rejected(self):
        with pytest.raises(ValueError):
            linalg.rank_truncate(np.eye(2), -1)


class TestCholSample:
    def test_moments(self):
        mean = np.array([1.0, -2.0])
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        x = linalg.chol_sample(mean, cov, 200_000, SeededRng(14))
        np.testing.assert_allclose(x.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(np.cov(x.T, bias=True), cov, atol=0.03)

    def test_deterministic(self):
        a = linalg.chol_sample(np.zeros(2), np.eye(2), 10, SeededRng(15))
        b = linalg.chol_sample(np.zeros(2), np.eye(2), 10, SeededRng(15))
        np.testing.assert_array_equal(a, b)


class TestMatrixJson:
    def test_round_trip_exact(self):
        m = SeededRng(16).standard_normal((3, 7))
        doc = linalg.matrix_to_json(m)
        assert doc["rows"] == 3 and doc["cols"] == 7
        back = linalg.matrix_from_json(doc)
        np.testing.assert_array_equal(back, m)

    def test_row_major_layout(self):
        doc = linalg.matrix_to_json(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert doc["data"] == [1.0, 2.0, 3.0, 4.0]
