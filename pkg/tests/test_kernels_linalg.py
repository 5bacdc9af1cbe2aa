import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmocgp.exceptions import InputShapeError, NumericalDegeneracyError
from hmocgp.kernels import (
    LmcSpec,
    RbfKernelParams,
    lmc_covariance,
    median_pairwise_distance,
    rbf_eval,
)
from hmocgp.linalg import cholesky_with_jitter, gaussian_conditional


def random_lmc(rng, D, Q, R):
    return LmcSpec(
        weights=[rng.standard_normal((D, R)) for _ in range(Q)],
        kernels=[RbfKernelParams(rng.uniform(-1, 1), rng.uniform(-1, 1)) for _ in range(Q)],
    )


class TestRbf:
    def test_zero_distance(self):
        assert rbf_eval([1.0, 2.0], [1.0, 2.0], RbfKernelParams(np.log(2.5), 0.3)) == pytest.approx(2.5, rel=1e-15)

    def test_one_lengthscale(self):
        ell = 1.7
        k = rbf_eval([0.0], [ell], RbfKernelParams(0.0, np.log(ell)))
        assert k == pytest.approx(0.6065306597126334, rel=1e-14)

    def test_tail(self):
        assert rbf_eval([0.0], [100.0], RbfKernelParams(0.0, 0.0)) < 1e-300

    def test_dimension_mismatch(self):
        with pytest.raises(InputShapeError):
            rbf_eval([0.0, 1.0], [0.0], RbfKernelParams())

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_symmetric(self, x, y):
        p = RbfKernelParams(0.2, -0.4)
        assert rbf_eval(x, y, p) == rbf_eval(y, x, p)

    @pytest.mark.parametrize("bad", [np.inf, np.nan, 1e6])
    def test_invalid_params(self, bad):
        with pytest.raises(ValueError):
            RbfKernelParams(bad, 0.0)


class TestLmc:
    def test_degenerate_is_single_kernel(self, rng):
        X = rng.uniform(0, 5, (6, 1))
        spec = LmcSpec([np.ones((1, 1))], [RbfKernelParams(0.3, 0.1)])
        K = lmc_covariance(X, X, spec)
        direct = np.array([[rbf_eval(a, b, spec.kernels[0]) for b in X] for a in X])
        np.testing.assert_allclose(K, direct, rtol=1e-14)

    def test_rank_one_ones_has_equal_blocks(self, rng):
        X = rng.uniform(0, 5, (4, 1))
        K = lmc_covariance(X, X, LmcSpec([np.ones((2, 1))], [RbfKernelParams()]))
        blocks = [K[:4, :4], K[:4, 4:], K[4:, :4], K[4:, 4:]]
        for b in blocks[1:]:
            assert np.array_equal(b, blocks[0])

    def test_brute_force_double_sum(self, rng):
        D, Q, R, N = 2, 2, 2, 4
        spec = random_lmc(rng, D, Q, R)
        X = rng.standard_normal((N, 2))
        K = lmc_covariance(X, X, spec, D=D)
        for d in range(D):
            for e in range(D):
                for n in range(N):
                    for m in range(N):
                        total = 0.0
                        for q in range(Q):
                            for i in range(R):
                                a = spec.weights[q]
                                total += a[d, i] * a[e, i] * rbf_eval(X[n], X[m], spec.kernels[q])
                        assert K[d * N + n, e * N + m] == pytest.approx(total, abs=1e-12)

    def test_cross_covariance_shape(self, rng):
        spec = random_lmc(rng, 3, 1, 2)
        K = lmc_covariance(rng.standard_normal((5, 1)), rng.standard_normal((7, 1)), spec)
        assert K.shape == (15, 21)

    def test_wrong_D(self, rng):
        with pytest.raises(InputShapeError):
            lmc_covariance(np.zeros((2, 1)), np.zeros((2, 1)), random_lmc(rng, 2, 1, 1), D=3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_psd(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_lmc(rng, rng.integers(1, 4), rng.integers(1, 3), rng.integers(1, 3))
        X = rng.uniform(-3, 3, (rng.integers(1, 8), 1))
        K = lmc_covariance(X, X, spec)
        assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.max(np.diag(K))

    def test_roundtrip_dict(self, rng):
        spec = random_lmc(rng, 2, 2, 1)
        back = LmcSpec.from_dict(spec.to_dict())
        assert all(np.array_equal(a, b) for a, b in zip(spec.weights, back.weights))
        assert back.kernels == spec.kernels

    def test_median_distance(self):
        assert median_pairwise_distance(np.array([[0.0], [1.0], [3.0]])) == 2.0


class TestCholesky:
    def test_identity(self):
        L, j = cholesky_with_jitter(np.eye(3))
        assert np.array_equal(L, np.eye(3)) and j == 0.0

    def test_hand_example(self):
        L, j = cholesky_with_jitter(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=1e-15)
        assert j == 0.0

    def test_rank_deficient(self):
        M = np.ones((2, 2))
        L, j = cholesky_with_jitter(M)
        assert 0 < j <= 1e-4
        assert np.max(np.abs(L @ L.T - (M + j * np.eye(2)))) <= 1e-8 * np.max(np.abs(M))

    def test_failure_names_matrix(self):
        with pytest.raises(NumericalDegeneracyError, match="K_test"):
            cholesky_with_jitter(np.array([[1.0, 0.0], [0.0, -5.0]]), name="K_test")

    def test_reconstruction(self, rng):
        spec = random_lmc(rng, 2, 1, 1)
        X = np.linspace(0, 1, 30)[:, None]
        M = lmc_covariance(X, X, spec)
        L, j = cholesky_with_jitter(M)
        assert np.max(np.abs(L @ L.T - (M + j * np.eye(len(M))))) <= 1e-8 * np.max(np.abs(M))


class TestGaussianConditional:
    def setup_problem(self, rng, n=5, m=3):
        X = rng.uniform(0, 4, (n, 1))
        Xs = rng.uniform(0, 4, (m, 1))
        spec = LmcSpec([np.array([[1.2]])], [RbfKernelParams(0.0, 0.0)])
        K = lmc_covariance(X, X, spec) + 1e-3 * np.eye(n)
        Ksn = lmc_covariance(Xs, X, spec)
        Kss = lmc_covariance(Xs, Xs, spec)
        mu = rng.standard_normal(n)
        A = rng.standard_normal((n, n))
        S = 0.1 * A @ A.T
        return K, Ksn, Kss, mu, S

    def test_dense_inverse_oracle(self, rng):
        K, Ksn, Kss, mu, S = self.setup_problem(rng)
        mean, cov = gaussian_conditional(K, Ksn, Kss, mu, S)
        Ki = np.linalg.inv(K)
        np.testing.assert_allclose(mean, Ksn @ Ki @ mu, atol=1e-8)
        np.testing.assert_allclose(cov, Kss - Ksn @ Ki @ Ksn.T + Ksn @ Ki @ S @ Ki @ Ksn.T, atol=1e-8)

    def test_training_point_collapses(self, rng):
        K, _, _, mu, S = self.setup_problem(rng)
        mean, cov = gaussian_conditional(K, K[[2]], K[[2]][:, [2]], mu, S)
        assert mean[0] == pytest.approx(mu[2], abs=1e-8)
        assert cov[0, 0] == pytest.approx(S[2, 2], abs=1e-8)

    def test_far_away_is_prior(self, rng):
        K, Ksn, Kss, mu, S = self.setup_problem(rng)
        mean, cov = gaussian_conditional(K, np.zeros_like(Ksn), Kss, mu, S)
        assert np.all(mean == 0) and np.allclose(cov, Kss)

    def test_prior_posterior_gives_prior(self, rng):
        K, Ksn, Kss, _, _ = self.setup_problem(rng)
        mean, cov = gaussian_conditional(K, Ksn, Kss, np.zeros(len(K)), K)
        np.testing.assert_allclose(mean, 0.0, atol=1e-8)
        np.testing.assert_allclose(cov, Kss, atol=1e-8)

    def test_diagonal_mode_matches_full(self, rng):
        K, Ksn, Kss, mu, S = self.setup_problem(rng)
        _, cov = gaussian_conditional(K, Ksn, Kss, mu, S)
        _, var = gaussian_conditional(K, Ksn, np.diag(Kss), mu, S, full_cov=False)
        np.testing.assert_allclose(var, np.diag(cov), atol=1e-12)

    def test_shape_errors(self, rng):
        K, Ksn, Kss, mu, S = self.setup_problem(rng)
        with pytest.raises(InputShapeError):
            gaussian_conditional(K, Ksn[:, :-1], Kss, mu, S)
