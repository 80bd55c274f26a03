import numpy as np
import pytest
from scipy.integrate import quad

from backend_errors import InsufficientDataError, NumericError, ShapeError, SingularityError
from conftest import random_spd
from plda_linalg import (
    EPS_REG,
    coral_transform,
    estimate_mean_cov,
    gauss_logpdf,
    regularize,
    simul_diag,
    sym_eig,
    sym_power,
    symmetrize,
)


class TestEstimateMeanCov:
    def test_two_points(self):
        mean, cov = estimate_mean_cov([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_allclose(mean, [1.0, 1.0])
        np.testing.assert_allclose(cov, [[1.0, 1.0], [1.0, 1.0]])

    def test_constant_scalars(self):
        mean, cov = estimate_mean_cov([1.0, 1.0, 1.0])
        np.testing.assert_allclose(mean, [1.0])
        np.testing.assert_allclose(cov, [[0.0]])

    def test_sampled_gaussian(self, rng):
        truth = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = rng.multivariate_normal([0.0, 0.0], truth, size=20000)
        _, cov = estimate_mean_cov(x)
        np.testing.assert_allclose(cov, truth, atol=0.1)

    def test_symmetric_exactly(self, rng):
        _, cov = estimate_mean_cov(rng.standard_normal((50, 5)))
        assert np.array_equal(cov, cov.T)

    def test_single_vector_rejected(self):
        with pytest.raises(InsufficientDataError):
            estimate_mean_cov([[1.0, 2.0]])

    def test_ragged_rejected(self):
        with pytest.raises(ShapeError):
            estimate_mean_cov([[1.0, 2.0], [1.0]])


class TestSymEig:
    def test_identity(self):
        values, vectors = sym_eig(np.eye(3))
        np.testing.assert_allclose(values, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(3), atol=1e-10)
        assert np.all(vectors[np.argmax(np.abs(vectors), axis=0), range(3)] > 0)

    def test_diagonal(self):
        values, vectors = sym_eig(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(values, [3.0, 1.0])
        np.testing.assert_allclose(vectors, np.eye(2), atol=1e-12)

    def test_reconstruction(self, rng):
        m = random_spd(rng, 5)
        values, vectors = sym_eig(m)
        assert np.all(np.diff(values) <= 0)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(5), atol=1e-10)
        error = np.linalg.norm(vectors @ np.diag(values) @ vectors.T - m)
        assert error < 1e-10 * (1 + np.linalg.norm(m))

    def test_sign_convention_is_deterministic(self, rng):
        m = random_spd(rng, 6)
        first = sym_eig(m).vectors
        second = sym_eig(m.copy()).vectors
        assert np.array_equal(first, second)
        lead = np.argmax(np.abs(first), axis=0)
        assert np.all(first[lead, range(6)] > 0)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))


class TestSymPower:
    def test_identity_inverse_root(self):
        np.testing.assert_allclose(sym_power(np.eye(2), -0.5), np.eye(2), atol=1e-12)

    def test_diagonal_root(self):
        np.testing.assert_allclose(sym_power(np.diag([4.0, 9.0]), 0.5), np.diag([2.0, 3.0]), atol=1e-12)

    def test_root_squares_back(self, rng):
        m = random_spd(rng, 4)
        root = sym_power(m, 0.5)
        np.testing.assert_allclose(root @ root, m, atol=1e-8)
        np.testing.assert_allclose(sym_power(root, 2), m, atol=1e-8)

    def test_power_one_is_input(self, rng):
        m = random_spd(rng, 3)
        np.testing.assert_allclose(sym_power(m, 1), m, rtol=1e-15)

    def test_singular_inverse_names_eigenvalue(self):
        with pytest.raises(SingularityError) as excinfo:
            sym_power(np.diag([1.0, 0.0]), -1)
        assert excinfo.value.eigenvalue == pytest.approx(0.0)

    def test_positive_integer_power_of_singular_is_fine(self):
        np.testing.assert_allclose(sym_power(np.diag([2.0, 0.0]), 2), np.diag([4.0, 0.0]), atol=1e-12)


class TestCoralTransform:
    def test_equal_covariances_give_identity(self, rng):
        c = random_spd(rng, 4)
        np.testing.assert_allclose(coral_transform(c, c.copy()), np.eye(4), atol=1e-10)

    def test_scalar(self):
        np.testing.assert_allclose(coral_transform([[4.0]], [[1.0]]), [[2.0]], rtol=1e-15)

    def test_maps_covariance_exactly(self, rng):
        c_in, c_out = random_spd(rng, 6), random_spd(rng, 6)
        a = coral_transform(c_in, c_out)
        np.testing.assert_allclose(a @ c_out @ a.T, c_in, atol=1e-8)

    def test_singular_out_domain(self):
        with pytest.raises(SingularityError):
            coral_transform(np.eye(2), np.diag([1.0, 0.0]))


class TestSimulDiag:
    def test_identity_and_diagonal(self):
        b, lam = simul_diag(np.eye(2), np.diag([3.0, 2.0]))
        np.testing.assert_allclose(b, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(lam, [3.0, 2.0])

    def test_scalar(self):
        b, lam = simul_diag([[4.0]], [[8.0]])
        np.testing.assert_allclose(b, [[0.5]])
        np.testing.assert_allclose(lam, [2.0])

    def test_defining_identities(self, rng):
        phi1, phi2 = random_spd(rng, 5), random_spd(rng, 5)
        b, lam = simul_diag(phi1, phi2)
        np.testing.assert_allclose(b.T @ phi1 @ b, np.eye(5), atol=1e-8)
        np.testing.assert_allclose(b.T @ phi2 @ b, np.diag(lam), atol=1e-8)
        assert np.all(np.diff(lam) <= 0)

    def test_singular_first_argument(self):
        with pytest.raises(SingularityError):
            simul_diag(np.zeros((2, 2)), np.eye(2))


class TestGaussLogpdf:
    def test_standard_normal_at_zero(self):
        assert gauss_logpdf([0.0], [0.0], [[1.0]]) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_bivariate_at_mean(self):
        assert gauss_logpdf([1.0, -2.0], [1.0, -2.0], np.eye(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)

    def test_hand_value(self):
        expected = -0.5 * np.log(8 * np.pi) - 0.125
        assert gauss_logpdf([1.0], [0.0], [[4.0]]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(-1.737086, abs=1e-6)

    def test_batch(self, rng):
        cov = random_spd(rng, 3)
        x = rng.standard_normal((7, 3))
        batch = gauss_logpdf(x, np.zeros(3), cov)
        singles = [gauss_logpdf(row, np.zeros(3), cov) for row in x]
        np.testing.assert_allclose(batch, singles, rtol=1e-12)

    def test_integrates_to_one(self):
        sigma = 1.7
        total, _ = quad(lambda v: np.exp(gauss_logpdf([v], [0.3], [[sigma ** 2]])), 0.3 - 10 * sigma, 0.3 + 10 * sigma)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_singular_covariance(self):
        with pytest.raises(SingularityError):
            gauss_logpdf([0.0, 0.0], [0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])


class TestRegularize:
    def test_adds_relative_ridge(self):
        m = np.diag([2.0, 4.0])
        np.testing.assert_allclose(regularize(m), m + EPS_REG * 3.0 * np.eye(2))

    def test_zero_disables(self):
        m = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert np.array_equal(regularize(m, 0.0), m)

    def test_symmetrize_is_exact(self, rng):
        m = symmetrize(rng.standard_normal((4, 4)))
        assert np.array_equal(m, m.T)
