import numpy as np
import pytest

from nestdoa.arrays import (ArrayGeometry, Scenario, SnapshotMatrix,
                            dictionary_column_derivative, dictionary_derivative_matrix,
                            exact_covariance, load_snapshots, nested_positions,
                            save_snapshots, simulate_snapshots, steering_derivative,
                            steering_matrix, steering_vector, virtual_dictionary)

GEOM = ArrayGeometry.nested(3, 3)


class TestNestedPositions:
    def test_three_three(self):
        assert nested_positions(3, 3) == [0, 1, 2, 3, 7, 11]

    def test_one_one(self):
        assert nested_positions(1, 1) == [0, 1]

    def test_two_two(self):
        assert nested_positions(2, 2) == [0, 1, 2, 5]

    @pytest.mark.parametrize("m1,m2", [(0, 3), (3, 0), (-1, 2)])
    def test_invalid_sizes(self, m1, m2):
        with pytest.raises(ValueError):
            nested_positions(m1, m2)

    def test_coarray_covers_consecutive_lags(self):
        # pairwise differences of the (3,3) layout cover every lag 0..11
        pos = np.array(nested_positions(3, 3))
        diffs = {abs(a - b) for a in pos for b in pos}
        assert set(range(12)) <= diffs


class TestGeometry:
    def test_nested_constructor_fields(self):
        assert GEOM.num_sensors == 6
        assert GEOM.positions == (0, 1, 2, 3, 7, 11)
        assert GEOM.d == 0.5 and GEOM.wavelength == 1.0

    def test_from_positions(self):
        g = ArrayGeometry.from_positions([0, 2, 5])
        assert g.num_sensors == 3 and g.m1 is None

    def test_rejects_wrong_nested_positions(self):
        with pytest.raises(ValueError):
            ArrayGeometry(positions=(0, 1, 2), m1=2, m2=2)

    def test_rejects_nonincreasing(self):
        with pytest.raises(ValueError):
            ArrayGeometry.from_positions([0, 2, 2])

    def test_rejects_missing_reference(self):
        with pytest.raises(ValueError):
            ArrayGeometry.from_positions([1, 2, 3])


class TestSteering:
    def test_broadside_is_all_ones(self):
        np.testing.assert_allclose(steering_vector(GEOM, 0.0), np.ones(6))

    def test_endfire_two_element(self):
        g = ArrayGeometry.from_positions([0, 1])
        np.testing.assert_allclose(steering_vector(g, 90.0), [1.0, -1.0], atol=1e-12)

    def test_unit_modulus_everywhere(self):
        grid = np.arange(-90.0, 90.5, 1.0)
        a = steering_matrix(GEOM, grid)
        np.testing.assert_allclose(np.abs(a), 1.0, atol=1e-12)

    @pytest.mark.parametrize("theta", [-90.1, 90.1, np.nan])
    def test_domain_error(self, theta):
        with pytest.raises(ValueError):
            steering_vector(GEOM, theta)

    def test_derivative_zero_at_endfire(self):
        d = steering_derivative(GEOM, 90.0)
        np.testing.assert_allclose(d, 0.0, atol=1e-12)

    def test_derivative_reference_sensor_zero(self):
        for theta in (-60.0, 0.0, 33.3):
            assert steering_derivative(GEOM, theta)[0] == 0.0

    def test_derivative_matches_finite_difference(self):
        # central differences with a 1e-5 deg step across a 1 deg grid
        h = 1e-5
        grid = np.arange(-89.0, 89.5, 1.0)
        analytic = np.stack([steering_derivative(GEOM, t) for t in grid])
        fd = np.stack([(steering_vector(GEOM, t + h) - steering_vector(GEOM, t - h)) / (2 * h)
                       for t in grid])
        err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3)
        assert err.max() < 1e-6


class TestVirtualDictionary:
    def test_broadside_column_all_ones(self):
        col = virtual_dictionary(GEOM, [0.0])[:, 0]
        np.testing.assert_allclose(col, np.ones(36))

    def test_matches_vectorized_rank_one_covariance(self):
        # vec(a rho a^H) equals rho times the dictionary column
        theta, rho = 37.3, 2.5
        a = steering_vector(GEOM, theta)
        lhs = (rho * np.outer(a, a.conj())).reshape(-1, order="F")
        rhs = rho * virtual_dictionary(GEOM, [theta])[:, 0]
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_unit_modulus_entries(self):
        b = virtual_dictionary(GEOM, np.linspace(-80, 80, 17))
        np.testing.assert_allclose(np.abs(b), 1.0, atol=1e-12)

    def test_vec_diagonal_entries_are_one(self):
        b = virtual_dictionary(GEOM, [12.5])[:, 0]
        m = GEOM.num_sensors
        diag_idx = [i * m + i for i in range(m)]
        np.testing.assert_allclose(b[diag_idx], 1.0, atol=1e-12)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            virtual_dictionary(GEOM, [])

    def test_column_derivative_zero_at_endfire(self):
        np.testing.assert_allclose(dictionary_column_derivative(GEOM, 90.0), 0.0, atol=1e-12)

    def test_column_derivative_reference_entry_constant(self):
        # entry (0,0) of a a^H is identically 1, so its derivative vanishes
        d = dictionary_column_derivative(GEOM, 24.0)
        assert abs(d[0]) < 1e-14

    def test_column_derivative_matches_finite_difference(self):
        h = 1e-5
        for phi in (-71.2, -10.0, 0.4, 55.7):
            analytic = dictionary_column_derivative(GEOM, phi)
            fd = (virtual_dictionary(GEOM, [phi + h])[:, 0]
                  - virtual_dictionary(GEOM, [phi - h])[:, 0]) / (2 * h)
            err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3)
            assert err.max() < 1e-6

    def test_derivative_matrix_consistent_with_columns(self):
        grid = [-40.0, 3.0, 62.0]
        mat = dictionary_derivative_matrix(GEOM, grid)
        for j, phi in enumerate(grid):
            np.testing.assert_allclose(mat[:, j], dictionary_column_derivative(GEOM, phi))


class TestScenario:
    def test_rejects_nonpositive_power(self):
        with pytest.raises(ValueError):
            Scenario((0.0,), (0.0,), 1.0, 10)

    def test_rejects_zero_noise(self):
        with pytest.raises(ValueError):
            Scenario((0.0,), (1.0,), 0.0, 10)

    def test_rejects_duplicate_doas(self):
        with pytest.raises(ValueError):
            Scenario((10.0, 10.0), (1.0, 1.0), 0.1, 10)

    def test_rejects_zero_snapshots(self):
        with pytest.raises(ValueError):
            Scenario((10.0,), (1.0,), 0.1, 0)

    def test_noise_only_scenario_allowed(self):
        sc = Scenario((), (), 1.0, 5)
        assert sc.num_sources == 0


class TestSimulation:
    def test_deterministic_given_seed(self):
        sc = Scenario((-20.0, 15.0), (1.0, 2.0), 0.5, 64, seed=11)
        y1 = simulate_snapshots(GEOM, sc)
        y2 = simulate_snapshots(GEOM, sc)
        assert np.array_equal(y1.data, y2.data)

    def test_shape(self):
        sc = Scenario((5.0,), (1.0,), 0.1, 33, seed=0)
        y = simulate_snapshots(GEOM, sc)
        assert y.data.shape == (6, 33)

    def test_noise_only_covariance(self):
        # K = 0: sample covariance approaches sigma^2 I
        t = 100_000
        sigma2 = 0.8
        sc = Scenario((), (), sigma2, t, seed=5)
        y = simulate_snapshots(GEOM, sc).data
        r = y @ y.conj().T / t
        off = r - np.diag(np.diag(r))
        assert np.abs(off).max() < 5 * sigma2 / np.sqrt(t)
        np.testing.assert_allclose(np.diag(r).real, sigma2, rtol=5 / np.sqrt(t) * 5)

    def test_single_source_low_noise_covariance(self):
        t = 100_000
        theta, rho = 24.0, 1.7
        sc = Scenario((theta,), (rho,), 1e-12, t, seed=9)
        y = simulate_snapshots(GEOM, sc).data
        r = y @ y.conj().T / t
        a = steering_vector(GEOM, theta)
        target = rho * np.outer(a, a.conj())
        rel = np.linalg.norm(r - target) / np.linalg.norm(target)
        assert rel < 5 / np.sqrt(t)

    def test_sample_covariance_near_population(self):
        t = 100_000
        sc = Scenario((-30.0, 10.0), (1.0, 0.5), 0.3, t, seed=21)
        y = simulate_snapshots(GEOM, sc).data
        r = y @ y.conj().T / t
        ry = exact_covariance(GEOM, sc.doas_deg, sc.powers, sc.noise_var)
        assert np.linalg.norm(r - ry) < 5 * np.linalg.norm(ry) / np.sqrt(t)


class TestSnapshotIO:
    def test_roundtrip(self, tmp_path):
        sc = Scenario((12.0, -41.0), (1.0, 1.0), 0.2, 17, seed=3)
        y = simulate_snapshots(GEOM, sc)
        path = tmp_path / "snaps.csv"
        save_snapshots(y, path)
        back = load_snapshots(path)
        assert np.array_equal(back.data, y.data)

    def test_identical_files_for_identical_seeds(self, tmp_path):
        sc = Scenario((12.0,), (1.0,), 0.2, 9, seed=3)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_snapshots(simulate_snapshots(GEOM, sc), p1)
        save_snapshots(simulate_snapshots(GEOM, sc), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("2,3\n1,0,1,0\n")
        with pytest.raises(ValueError):
            load_snapshots(path)

    def test_snapshot_matrix_requires_2d(self):
        with pytest.raises(ValueError):
            SnapshotMatrix(np.zeros(5))
