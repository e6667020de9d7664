"""Dense and Kronecker-structured linear algebra against explicit oracles."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nngrad import linalg
from nngrad.linalg import KroneckerPair, NotPositiveDefinite


def random_spd(rng, n, jitter=0.1):
    a = rng.standard_normal((n, n + 2))
    return linalg.symmetrize(a @ a.T) + jitter * np.eye(n)


class TestCholesky:
    def test_identity(self):
        assert_allclose(linalg.cholesky(np.eye(3)), np.eye(3))

    def test_hand_factor_and_reconstruction(self):
        m = np.array([[4.0, 2.0], [2.0, 3.0]])
        chol = linalg.cholesky(m)
        assert_allclose(chol, [[2.0, 0.0], [1.0, np.sqrt(2.0)]])
        assert_allclose(chol @ chol.T, m, rtol=1e-10)

    def test_indefinite_raises(self):
        # Eigenvalues are 3 and -1.
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_random_reconstruction(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = random_spd(rng, int(rng.integers(1, 8)))
            chol = linalg.cholesky(m)
            assert_allclose(chol @ chol.T, m, rtol=1e-10, atol=1e-12)


class TestSpdSolve:
    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        assert_allclose(linalg.spd_solve(np.eye(3), b), b)

    def test_constructed_solution(self):
        rng = np.random.default_rng(1)
        m = random_spd(rng, 4)
        x0 = rng.standard_normal(4)
        b = m @ x0
        assert_allclose(linalg.spd_solve(m, b), x0, rtol=1e-9)

    def test_zero_pivot_raises(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.spd_solve(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones(2))

    def test_solve_residual_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(1, 10))
            m = random_spd(rng, n)
            b = rng.standard_normal(n)
            x = linalg.spd_solve(m, b)
            assert_allclose(m @ x, b, rtol=1e-8, atol=1e-10)


class TestKronSolve:
    def test_identity_factors(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((3, 2))
        pair = KroneckerPair(left=np.eye(2), right=np.eye(3), scale=1.0)
        assert_allclose(linalg.kron_solve(pair, v), v)

    def test_pure_scaling(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal((2, 2))
        pair = KroneckerPair(left=np.eye(2), right=np.eye(2), scale=2.0)
        assert_allclose(linalg.kron_solve(pair, v), v / 2.0)

    def test_matches_dense_kronecker(self):
        rng = np.random.default_rng(5)
        right = random_spd(rng, 2)
        left = random_spd(rng, 2)
        v = rng.standard_normal((2, 2))
        pair = KroneckerPair(left=left, right=right, scale=1.0)
        dense = np.kron(left, right)
        expected = linalg.unvec(np.linalg.solve(dense, linalg.vec(v)), (2, 2))
        assert_allclose(linalg.kron_solve(pair, v), expected, rtol=1e-9)

    def test_dense_equivalence_all_small_dims(self):
        rng = np.random.default_rng(6)
        for p in range(1, 5):
            for q in range(1, 5):
                for _ in range(5):
                    right = random_spd(rng, p)
                    left = random_spd(rng, q)
                    scale = float(rng.uniform(0.1, 4.0))
                    v = rng.standard_normal((p, q))
                    pair = KroneckerPair(left=left, right=right, scale=scale)
                    dense = scale * np.kron(left, right)
                    expected = linalg.unvec(np.linalg.solve(dense, linalg.vec(v)), (p, q))
                    assert_allclose(linalg.kron_solve(pair, v), expected, rtol=1e-9)

    def test_shape_mismatch(self):
        pair = KroneckerPair(left=np.eye(2), right=np.eye(3))
        with pytest.raises(ValueError):
            linalg.kron_solve(pair, np.zeros((2, 3)))


class TestKronQuadraticForm:
    def test_identity_factors_give_frobenius(self):
        rng = np.random.default_rng(7)
        v = rng.standard_normal((3, 2))
        pair = KroneckerPair(left=np.eye(2), right=np.eye(3))
        assert_allclose(linalg.kron_quadratic_form(pair, v), np.sum(v**2))

    def test_zero_operand(self):
        pair = KroneckerPair(left=np.eye(2), right=np.eye(2))
        assert linalg.kron_quadratic_form(pair, np.zeros((2, 2))) == 0.0

    def test_matches_dense_and_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            p, q = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            right = random_spd(rng, p)
            left = random_spd(rng, q)
            scale = float(rng.uniform(0.1, 3.0))
            v = rng.standard_normal((p, q))
            pair = KroneckerPair(left=left, right=right, scale=scale)
            vv = linalg.vec(v)
            expected = float(vv @ (scale * np.kron(left, right)) @ vv)
            got = linalg.kron_quadratic_form(pair, v)
            assert_allclose(got, expected, rtol=1e-9)
            assert got >= 0.0


class TestSampleGaussian:
    def test_deterministic_given_seed(self):
        draw1 = linalg.sample_gaussian(np.zeros(3), np.eye(3), np.random.default_rng(9))
        draw2 = linalg.sample_gaussian(np.zeros(3), np.eye(3), np.random.default_rng(9))
        assert_allclose(draw1, draw2)

    def test_monte_carlo_variance(self):
        rng = np.random.default_rng(10)
        draws = linalg.sample_gaussian(np.zeros(2), 2.0 * np.eye(2), rng, size=100_000)
        assert_allclose(draws.var(axis=0), 2.0, rtol=0.05)

    def test_degenerate_variance_limit(self):
        mean = np.array([1.5, -2.5])
        draw = linalg.sample_gaussian(mean, 1e-12 * np.eye(2), np.random.default_rng(11))
        assert np.max(np.abs(draw - mean)) < 1e-5


class TestSampleMvg:
    def test_identity_factors_are_standard_normal_shift(self):
        m = np.arange(6.0).reshape(3, 2)
        w = linalg.sample_mvg(m, np.eye(3), np.eye(2), np.random.default_rng(12))
        z = np.random.default_rng(12).standard_normal((3, 2))
        assert_allclose(w, m + z)

    def test_vec_covariance_matches_dense_kronecker(self):
        rng = np.random.default_rng(13)
        row_cov = random_spd(rng, 2)
        col_cov = random_spd(rng, 2)
        m = np.zeros((2, 2))
        draws = linalg.sample_mvg(m, row_cov, col_cov, rng, size=100_000)
        vecs = draws.transpose(0, 2, 1).reshape(draws.shape[0], -1)  # Fortran vec per draw
        emp = np.cov(vecs.T)
        dense = np.kron(col_cov, row_cov)
        frob = np.linalg.norm(emp - dense) / np.linalg.norm(dense)
        assert frob < 0.05

    def test_degenerate_limit(self):
        m = np.array([[2.0, -1.0], [0.5, 3.0]])
        w = linalg.sample_mvg(m, 1e-12 * np.eye(2), 1e-12 * np.eye(2), np.random.default_rng(14))
        assert np.max(np.abs(w - m)) < 1e-5

    def test_two_sample_moment_check_against_dense_gaussian(self):
        # Matrix-variate draws and dense-covariance draws are the same
        # distribution; their per-coordinate means agree within 3 SE.
        rng = np.random.default_rng(15)
        row_cov = random_spd(rng, 2)
        col_cov = random_spd(rng, 3)
        m = rng.standard_normal((2, 3))
        n = 100_000
        mvg = linalg.sample_mvg(m, row_cov, col_cov, rng, size=n)
        mvg_vecs = mvg.transpose(0, 2, 1).reshape(n, -1)
        dense = linalg.sample_gaussian(
            linalg.vec(m), np.kron(col_cov, row_cov), rng, size=n
        )
        diff = mvg_vecs.mean(axis=0) - dense.mean(axis=0)
        pooled_se = np.sqrt(mvg_vecs.var(axis=0) / n + dense.var(axis=0) / n)
        assert np.all(np.abs(diff) < 3.0 * pooled_se + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            linalg.sample_mvg(np.zeros((2, 3)), np.eye(3), np.eye(3), np.random.default_rng(0))
