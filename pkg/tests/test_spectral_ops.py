import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import cho_factor, cho_solve

from efigp.kernels import KernelHyperparams, kernel_block, matern_value
from efigp.ode_models import TimeGrid
from efigp.spectral_ops import (
    EigenBasis,
    build_fourier_operator,
    project_to_coefficients,
    push_covariance,
    synthesize_trajectory,
    truncated_eigen,
)


def random_psd(n, rng, rank=None):
    A = rng.standard_normal((n, rank or n))
    return A @ A.T / n


class TestTruncatedEigen:
    def test_identity(self):
        basis = truncated_eigen(np.eye(3), 3)
        assert_allclose(basis.values, np.ones(3))
        assert_allclose(basis.vectors @ np.diag(basis.values) @ basis.vectors.T,
                        np.eye(3), atol=1e-10)

    def test_diagonal(self):
        basis = truncated_eigen(np.diag([2.0, 1.0]), 1)
        assert_allclose(basis.values, [2.0])
        assert_allclose(basis.vectors[:, 0], [1.0, 0.0])

    def test_dropped_energy_identity(self):
        rng = np.random.default_rng(0)
        K = random_psd(10, rng)
        basis = truncated_eigen(K, 4)
        resid = np.linalg.norm(K - basis.vectors @ np.diag(basis.values)
                               @ basis.vectors.T, "fro") ** 2
        all_vals = np.linalg.eigvalsh(K)[::-1]  # oracle: full decomposition
        expected = np.sum(all_vals[4:] ** 2)
        assert abs(resid - expected) <= 1e-8 * expected

    def test_orthonormal_and_descending(self):
        rng = np.random.default_rng(1)
        basis = truncated_eigen(random_psd(30, rng), 12)
        gram = basis.vectors.T @ basis.vectors
        assert np.max(np.abs(gram - np.eye(basis.j))) < 1e-10
        assert np.all(np.diff(basis.values) < 0)
        assert np.all(basis.values > 0)

    def test_tiny_eigenvalues_dropped(self):
        K = np.diag([1.0, 1e-20])
        basis = truncated_eigen(K, 2)
        assert basis.j == 1

    def test_sign_convention(self):
        rng = np.random.default_rng(2)
        basis = truncated_eigen(random_psd(15, rng), 15)
        idx = np.argmax(np.abs(basis.vectors), axis=0)
        assert np.all(basis.vectors[idx, np.arange(basis.j)] > 0)

    def test_asymmetric_rejected(self):
        K = np.eye(4)
        K[0, 1] = 1e-6
        with pytest.raises(ValueError):
            truncated_eigen(K, 2)

    def test_iterative_path_matches_dense(self):
        # n large + small j routes through ARPACK; compare against full eigh
        grid = TimeGrid.regular(0.0, 20.0, 321)
        cond = kernel_block(grid, KernelHyperparams(1.0, 2.0))
        basis = truncated_eigen(cond.K, 40)
        vals, vecs = np.linalg.eigh(cond.K)
        vals, vecs = vals[::-1][:40], vecs[:, ::-1][:, :40]
        assert_allclose(basis.values, vals, rtol=1e-9)
        assert_allclose(np.abs(basis.vectors), np.abs(vecs), atol=1e-7)


class TestSynthesizeProject:
    def test_zero_coefficients_give_mean(self):
        rng = np.random.default_rng(3)
        basis = truncated_eigen(random_psd(8, rng), 5)
        mean = rng.standard_normal(8)
        assert np.array_equal(synthesize_trajectory(basis, mean, np.zeros(5)), mean)

    def test_scalar_square_root(self):
        basis = truncated_eigen(np.array([[4.0]]), 1)
        assert_allclose(synthesize_trajectory(basis, np.zeros(1), np.ones(1)), [2.0])

    def test_project_of_mean_is_zero(self):
        rng = np.random.default_rng(4)
        basis = truncated_eigen(random_psd(9, rng), 9)
        mean = rng.standard_normal(9)
        assert_allclose(project_to_coefficients(basis, mean, mean), np.zeros(9))

    def test_single_mode_input(self):
        rng = np.random.default_rng(5)
        basis = truncated_eigen(random_psd(9, rng), 9)
        mean = rng.standard_normal(9)
        x = mean + np.sqrt(basis.values[0]) * basis.vectors[:, 0]
        z = project_to_coefficients(basis, mean, x)
        expected = np.zeros(9)
        expected[0] = 1.0
        assert_allclose(z, expected, atol=1e-10)

    def test_full_rank_round_trip(self):
        rng = np.random.default_rng(6)
        basis = truncated_eigen(random_psd(12, rng), 12)
        mean = rng.standard_normal(12)
        x = rng.standard_normal(12)
        back = synthesize_trajectory(basis, mean,
                                     project_to_coefficients(basis, mean, x))
        assert np.max(np.abs(back - x)) < 1e-8

    def test_length_mismatch_rejected(self):
        basis = truncated_eigen(np.eye(4), 2)
        with pytest.raises(ValueError):
            synthesize_trajectory(basis, np.zeros(4), np.zeros(3))
        with pytest.raises(ValueError):
            project_to_coefficients(basis, np.zeros(4), np.zeros(3))


class TestFourierOperator:
    def test_dc_of_constant(self):
        op = build_fourier_operator(4, 1)
        assert_allclose(op.matrix @ np.ones(4), [4.0])

    def test_delta_is_flat(self):
        op = build_fourier_operator(4, 2)
        delta = np.array([1.0, 0.0, 0.0, 0.0])
        assert_allclose(op.matrix @ delta, [1.0, 1.0, 0.0], atol=1e-15)

    def test_gram_matrix_n8_l4(self):
        op = build_fourier_operator(8, 4)
        gram = op.matrix @ op.matrix.T
        assert_allclose(gram, np.diag([8.0, 4, 4, 4, 4, 4, 4]), atol=1e-12)

    def test_row_count_and_bounds(self):
        op = build_fourier_operator(41, 11)
        assert op.matrix.shape == (21, 41)
        assert op.rows == 21
        with pytest.raises(ValueError):
            build_fourier_operator(4, 3)  # 2l-1 = 5 > 4
        with pytest.raises(ValueError):
            build_fourier_operator(4, 0)

    def test_row_norms(self):
        op = build_fourier_operator(41, 21)  # maximal odd case
        norms = np.sum(op.matrix ** 2, axis=1)
        assert_allclose(norms[0], 41.0, rtol=1e-12)
        assert_allclose(norms[1:], np.full(40, 20.5), rtol=1e-12)

    def test_matches_rfft_convention(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(16)
        op = build_fourier_operator(16, 5)
        spec = np.fft.rfft(x)
        expected = np.concatenate([spec.real[:5], spec.imag[1:5]])
        assert_allclose(op.matrix @ x, expected, atol=1e-12)


class TestPushCovariance:
    def test_identity_gives_gram(self):
        op = build_fourier_operator(8, 4)
        assert_allclose(push_covariance(op, np.eye(8)),
                        np.diag([8.0, 4, 4, 4, 4, 4, 4]), atol=1e-12)

    def test_monte_carlo_law(self):
        # empirical covariance of A x, x ~ N(0, C) for a seeded Matern C
        grid = TimeGrid.regular(0.0, 20.0, 41)
        C = kernel_block(grid, KernelHyperparams(1.0, 2.0)).K
        op = build_fourier_operator(41, 11)
        target = push_covariance(op, C)
        L = np.linalg.cholesky(C)
        rng = np.random.default_rng(12345)
        acc = np.zeros((op.rows, op.rows))
        ndraw = 200_000
        for _ in range(20):
            X = rng.standard_normal((ndraw // 20, 41)) @ L.T
            Y = X @ op.matrix.T
            acc += Y.T @ Y
        emp = acc / ndraw
        rel = np.linalg.norm(emp - target, "fro") / np.linalg.norm(target, "fro")
        assert rel < 0.02

    def test_result_symmetric_psd(self):
        rng = np.random.default_rng(8)
        C = random_psd(20, rng)
        op = build_fourier_operator(20, 6)
        out = push_covariance(op, C)
        assert np.array_equal(out, out.T)
        assert np.linalg.eigvalsh(out).min() >= -1e-8 * np.trace(out)

    def test_shape_mismatch_rejected(self):
        op = build_fourier_operator(8, 3)
        with pytest.raises(ValueError):
            push_covariance(op, np.eye(7))


class TestSamplingLaws:
    def test_eigen_sampling_law(self):
        # Lemma-style check: cov of synthesize(basis, 0, z) reproduces K
        rng = np.random.default_rng(9)
        K = random_psd(10, rng)
        basis = truncated_eigen(K, 10)
        Z = rng.standard_normal((200_000, basis.j))
        X = Z @ basis.scaled_vectors.T
        emp = X.T @ X / Z.shape[0]
        rel = np.linalg.norm(emp - K, "fro") / np.linalg.norm(K, "fro")
        assert rel < 0.02

    def test_energy_capture_dense_grid(self):
        grid = TimeGrid.regular(0.0, 20.0, 1281)
        cond = kernel_block(grid, KernelHyperparams(1.0, 2.0))
        basis = truncated_eigen(cond.K, 81)
        frac = basis.values.sum() / np.trace(cond.K)
        assert frac > 0.999

    def test_quadratic_form_equivalence_at_maximal_truncation(self):
        # odd n, l = (n+1)/2: ||A r||^2 in pushed metric equals ||r||^2 in C^{-1}
        rng = np.random.default_rng(10)
        n = 41
        op = build_fourier_operator(n, (n + 1) // 2)
        for C in (random_psd(n, rng) + 0.1 * np.eye(n),
                  kernel_block(TimeGrid.regular(0, 20, n),
                               KernelHyperparams(1.0, 2.0)).C):
            CF = push_covariance(op, C)
            cf_t = cho_factor(C, lower=True)
            cf_f = cho_factor(CF, lower=True)
            for _ in range(5):
                r = rng.standard_normal(n)
                q_time = r @ cho_solve(cf_t, r)
                fr = op.matrix @ r
                q_fourier = fr @ cho_solve(cf_f, fr)
                assert abs(q_fourier - q_time) < 1e-6 * abs(q_time)
