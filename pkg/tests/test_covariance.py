import numpy as np
import pytest

from nestdoa.arrays import (ArrayGeometry, Scenario, SnapshotMatrix, simulate_snapshots,
                            steering_vector, virtual_dictionary)
from nestdoa.covariance import (CovarianceData, NoiseCovariance, SigmaFactor, SpdFactor,
                                apply_noise_covariance_inverse, assemble_sigma,
                                build_real_model, covariance_from_matrix, identity_selector,
                                sample_covariance, unvectorize, vectorize_covariance)

GEOM = ArrayGeometry.nested(3, 3)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_cov(rng, m=3, cols=24, snapshots=100):
    y = crandn(rng, m, cols)
    return covariance_from_matrix(y @ y.conj().T / cols, snapshots)


class TestVectorize:
    def test_identity_two(self):
        np.testing.assert_array_equal(vectorize_covariance(np.eye(2)), [1, 0, 0, 1])

    def test_outer_product_identity(self):
        rng = np.random.default_rng(0)
        a, b = crandn(rng, 4), crandn(rng, 4)
        np.testing.assert_allclose(vectorize_covariance(np.outer(a, b.conj())),
                                   np.kron(b.conj(), a), atol=1e-14)

    def test_basis_placement(self):
        m = 3
        e = np.zeros((m, m))
        e[1, 2] = 1.0  # e_i e_j^T with i=1, j=2 lands at j*M + i
        v = vectorize_covariance(e)
        assert v[2 * m + 1] == 1.0 and np.sum(v) == 1.0

    def test_selector_has_m_ones(self):
        s = identity_selector(5)
        assert np.sum(s) == 5 and set(np.unique(s)) == {0.0, 1.0}

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            vectorize_covariance(np.zeros((2, 3)))

    def test_unvectorize_roundtrip(self):
        rng = np.random.default_rng(1)
        r = crandn(rng, 4, 4)
        np.testing.assert_array_equal(unvectorize(vectorize_covariance(r)), r)


class TestSampleCovariance:
    def test_single_snapshot_rank_one(self):
        rng = np.random.default_rng(2)
        y = crandn(rng, 6, 1)
        cov = sample_covariance(SnapshotMatrix(y))
        np.testing.assert_allclose(cov.r_hat_matrix, y @ y.conj().T, atol=1e-14)
        assert np.linalg.matrix_rank(cov.r_hat_matrix) == 1

    def test_constant_snapshots(self):
        rng = np.random.default_rng(3)
        y0 = crandn(rng, 4)
        y = np.tile(y0[:, None], (1, 10))
        cov = sample_covariance(SnapshotMatrix(y))
        np.testing.assert_allclose(cov.r_hat_matrix, np.outer(y0, y0.conj()), atol=1e-13)

    def test_zero_snapshots_rejected(self):
        with pytest.raises(ValueError):
            sample_covariance(SnapshotMatrix(np.zeros((3, 0))))

    def test_noise_only_statistics(self):
        t = 100_000
        sc = Scenario((), (), 1.3, t, seed=8)
        cov = sample_covariance(simulate_snapshots(GEOM, sc))
        target = 1.3 * np.eye(6)
        assert (np.linalg.norm(cov.r_hat_matrix - target) / np.linalg.norm(target)
                < 5 / np.sqrt(t))

    def test_hermitian_and_psd(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            y = crandn(rng, 6, 20)
            cov = sample_covariance(SnapshotMatrix(y))
            r = cov.r_hat_matrix
            np.testing.assert_allclose(r, r.conj().T, atol=1e-14)
            assert np.linalg.eigvalsh(r)[0] > -1e-12

    def test_vec_consistency(self):
        rng = np.random.default_rng(5)
        cov = random_cov(rng)
        np.testing.assert_array_equal(cov.r_hat_vec, vectorize_covariance(cov.r_hat_matrix))


class TestRealModel:
    def test_zero_sigma_plain_stack(self):
        rng = np.random.default_rng(6)
        cov = random_cov(rng, m=6)
        b = virtual_dictionary(GEOM, np.linspace(-80, 80, 9))
        model = build_real_model(cov, 0.0, b)
        np.testing.assert_array_equal(model.r_bar[:36], cov.r_hat_vec.real)
        np.testing.assert_array_equal(model.r_bar[36:], cov.r_hat_vec.imag)

    def test_real_diagonal_gives_zero_imag_block(self):
        cov = covariance_from_matrix(np.diag([1.0, 2.0, 3.0]), 10)
        model = build_real_model(cov, 0.1, np.ones((9, 2), dtype=complex))
        np.testing.assert_array_equal(model.r_bar[9:], np.zeros(9))

    def test_noiseless_on_grid_source_is_exact(self):
        # exact covariance of an on-grid source satisfies r_bar = B_bar p
        grid = np.linspace(-90, 89, 60)
        theta = grid[41]
        rho = 1.8
        a = steering_vector(GEOM, theta)
        cov = covariance_from_matrix(rho * np.outer(a, a.conj()), 100)
        model = build_real_model(cov, 0.0, virtual_dictionary(GEOM, grid))
        p = np.zeros(60)
        p[41] = rho
        assert np.linalg.norm(model.r_bar - model.b_bar @ p) < 1e-10

    def test_lift_linearity(self):
        # linearity concerns the r_bar lift only; reuse one noise operator so an
        # indefinite mix does not trip the factorization
        rng = np.random.default_rng(7)
        c1, c2 = random_cov(rng, m=4), random_cov(rng, m=4)
        noise = NoiseCovariance(c1.r_hat_matrix, c1.snapshots)
        b = crandn(rng, 16, 3)
        alpha, beta = 0.7, -1.3
        mixed = covariance_from_matrix(
            alpha * c1.r_hat_matrix + beta * c2.r_hat_matrix, 10)
        m_mixed = build_real_model(mixed, 0.0, b, noise=noise)
        m1 = build_real_model(c1, 0.0, b, noise=noise)
        m2 = build_real_model(c2, 0.0, b, noise=noise)
        np.testing.assert_allclose(m_mixed.r_bar, alpha * m1.r_bar + beta * m2.r_bar,
                                   atol=1e-12)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(8)
        cov = random_cov(rng, m=3)
        with pytest.raises(ValueError):
            build_real_model(cov, 0.0, np.ones((16, 2), dtype=complex))

    def test_negative_sigma_rejected(self):
        rng = np.random.default_rng(9)
        cov = random_cov(rng, m=3)
        with pytest.raises(ValueError):
            build_real_model(cov, -1.0, np.ones((9, 2), dtype=complex))

    def test_with_sigma_rebuilds(self):
        rng = np.random.default_rng(10)
        cov = random_cov(rng, m=3)
        model = build_real_model(cov, 0.0, np.ones((9, 2), dtype=complex))
        shifted = model.with_sigma(0.5)
        np.testing.assert_allclose(model.r_bar[:9] - shifted.r_bar[:9],
                                   0.5 * identity_selector(3))


class TestNoiseCovariance:
    def test_identity_single_snapshot(self):
        # R = I, T = 1: the lifted inverse is exactly 2x
        noise = NoiseCovariance(np.eye(3), 1)
        x = np.random.default_rng(11).standard_normal(18)
        np.testing.assert_allclose(noise.apply_inverse(x), 2 * x, atol=1e-12)

    def test_structured_matches_dense_inverse(self):
        rng = np.random.default_rng(12)
        cov = random_cov(rng, m=3, snapshots=50)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        x = rng.standard_normal(18)
        dense = np.linalg.solve(noise.dense(), x)
        rel = np.linalg.norm(noise.apply_inverse(x) - dense) / np.linalg.norm(dense)
        assert rel < 1e-8

    def test_roundtrip(self):
        rng = np.random.default_rng(13)
        cov = random_cov(rng, m=4, snapshots=77)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        x = rng.standard_normal((32, 3))
        back = noise.apply_inverse(noise.apply(x))
        assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-8

    def test_logdet_matches_dense(self):
        rng = np.random.default_rng(14)
        for m in (2, 3):
            cov = random_cov(rng, m=m, snapshots=33)
            noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
            sign, dense = np.linalg.slogdet(noise.dense())
            assert sign > 0
            assert abs(noise.logdet() - dense) / abs(dense) < 1e-10

    def test_singular_input_ridged_and_flagged(self):
        a = np.ones(4) / 2.0
        noise = NoiseCovariance(np.outer(a, a.conj()), 10)
        assert noise.diagnostics["regularized"] is True
        x = np.random.default_rng(15).standard_normal(32)
        assert np.all(np.isfinite(noise.apply_inverse(x)))

    def test_wrapper_function(self):
        rng = np.random.default_rng(16)
        cov = random_cov(rng, m=3)
        x = rng.standard_normal(18)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        np.testing.assert_allclose(apply_noise_covariance_inverse(cov, x),
                                   noise.apply_inverse(x))


class TestSigmaFactor:
    def test_zero_gamma_reduces_to_noise(self):
        rng = np.random.default_rng(17)
        cov = random_cov(rng, m=3)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        b = rng.standard_normal((18, 5))
        x = rng.standard_normal(18)
        for method in ("direct", "woodbury"):
            factor = SigmaFactor(b, np.zeros(5), noise, method=method)
            np.testing.assert_allclose(factor.solve(x), noise.apply_inverse(x), rtol=1e-9)
            assert abs(factor.logdet() - noise.logdet()) < 1e-8 * abs(noise.logdet())

    def test_rank_one_matches_determinant_lemma(self):
        rng = np.random.default_rng(18)
        cov = random_cov(rng, m=3)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        b = rng.standard_normal((18, 1))
        gamma = np.array([0.9])
        factor = SigmaFactor(b, gamma, noise, method="direct")
        quad = float(b[:, 0] @ noise.apply_inverse(b[:, 0]))
        expected = noise.logdet() + np.log(1.0 + gamma[0] * quad)
        assert abs(factor.logdet() - expected) / abs(expected) < 1e-10

    def test_woodbury_agrees_with_direct(self):
        rng = np.random.default_rng(19)
        cov = random_cov(rng, m=3, snapshots=64)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        for n in (4, 30):
            b = rng.standard_normal((18, n))
            gamma = rng.uniform(0, 2, n) * (rng.random(n) > 0.3)
            direct = SigmaFactor(b, gamma, noise, method="direct")
            wood = SigmaFactor(b, gamma, noise, method="woodbury")
            v = rng.standard_normal(18)
            rel = (np.linalg.norm(direct.solve(v) - wood.solve(v))
                   / np.linalg.norm(direct.solve(v)))
            assert rel < 1e-8
            np.testing.assert_allclose(direct.column_weights(b), wood.column_weights(b),
                                       rtol=1e-8)

    def test_logdet_matches_slow_dense_evaluation(self):
        # LU-based slogdet on the explicitly assembled matrix, 2 M^2 = 18
        rng = np.random.default_rng(20)
        cov = random_cov(rng, m=3)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        b = rng.standard_normal((18, 6))
        gamma = rng.uniform(0.1, 2.0, 6)
        sig = (b * gamma) @ b.T + noise.dense()
        expected = np.linalg.slogdet(sig)[1]
        for method in ("direct", "woodbury"):
            factor = SigmaFactor(b, gamma, noise, method=method)
            assert abs(factor.logdet() - expected) / abs(expected) < 1e-10

    def test_nonfinite_gamma_rejected(self):
        rng = np.random.default_rng(21)
        cov = random_cov(rng, m=3)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        b = rng.standard_normal((18, 2))
        with pytest.raises(ValueError):
            SigmaFactor(b, np.array([1.0, np.nan]), noise)
        with pytest.raises(ValueError):
            SigmaFactor(b, np.array([1.0, -0.5]), noise)

    def test_auto_method_selection(self):
        rng = np.random.default_rng(22)
        cov = random_cov(rng, m=3)
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
        few = SigmaFactor(rng.standard_normal((18, 4)), np.ones(4), noise)
        many = SigmaFactor(rng.standard_normal((18, 40)), np.ones(40), noise)
        assert few.method == "woodbury" and many.method == "direct"

    def test_assemble_sigma_from_model(self):
        rng = np.random.default_rng(23)
        cov = random_cov(rng, m=6)
        grid = np.linspace(-60, 60, 7)
        model = build_real_model(cov, 0.0, virtual_dictionary(GEOM, grid))
        factor = assemble_sigma(model, np.ones(7))
        v = rng.standard_normal(72)
        sig = (model.b_bar * np.ones(7)) @ model.b_bar.T + model.noise.dense()
        np.testing.assert_allclose(factor.solve(v), np.linalg.solve(sig, v), rtol=1e-7)


class TestSpdFactor:
    def test_matches_plain_solve(self):
        rng = np.random.default_rng(24)
        a = rng.standard_normal((9, 9))
        a = a @ a.T + 9 * np.eye(9)
        f = SpdFactor(a)
        x = rng.standard_normal(9)
        np.testing.assert_allclose(f.solve(x), np.linalg.solve(a, x), rtol=1e-10)
        assert abs(f.logdet - np.linalg.slogdet(a)[1]) < 1e-10
        assert not f.regularized

    def test_floors_near_singular(self):
        a = np.diag([1.0, 1e-30, 1.0])
        f = SpdFactor(a)
        assert f.regularized
        assert np.all(np.isfinite(f.solve(np.ones(3))))
