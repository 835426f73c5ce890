import itertools

import numpy as np
from django.test import SimpleTestCase

from .services import (
    CenteredKernel,
    DataMatrix,
    FactorizationError,
    InsufficientSamplesError,
    NonFiniteInputError,
    UnknownColumnSelectorError,
    center_kernel,
    cholesky_with_jitter,
    empirical_width,
    gaussian_centered_kernel,
    gaussian_kernel_matrix,
    median_width,
    spectral_features,
    standardize,
)


def random_psd_centered(rng, n, rank=None):
    """Random centered PSD matrix for spectral checks."""
    factor = rng.standard_normal((n, rank or n))
    return center_kernel(factor @ factor.T)


class StandardizeTest(SimpleTestCase):
    # two points land symmetrically around 0 with unit (n - 1) variance
    def test_two_point_column(self):
        data = standardize([[1.0], [3.0]])
        np.testing.assert_allclose(data.values[:, 0], [-1 / np.sqrt(2), 1 / np.sqrt(2)])
        self.assertAlmostEqual(data.values[:, 0].var(ddof=1), 1.0, places=12)
        self.assertTrue(data.standardized)

    def test_constant_column_becomes_zeros(self):
        data = standardize([[5.0], [5.0], [5.0]])
        np.testing.assert_array_equal(data.values[:, 0], [0.0, 0.0, 0.0])

    def test_moments_recomputed(self):
        data = standardize(np.array([[0.0], [1.0], [2.0], [3.0]]))
        column = data.values[:, 0]
        self.assertLess(abs(column.mean()), 1e-10)
        self.assertLess(abs(column.var(ddof=1) - 1.0), 1e-8)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        once = standardize(rng.normal(4.0, 3.0, size=(50, 3)))
        twice = standardize(once.values)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-10)

    # the diagnostic has to point at the offending cell
    def test_non_finite_rejected_with_location(self):
        raw = np.ones((4, 2))
        raw[2, 1] = np.nan
        with self.assertRaises(NonFiniteInputError) as ctx:
            standardize(raw, column_names=["a", "b"])
        self.assertIn("row 2", str(ctx.exception))
        self.assertIn("column b", str(ctx.exception))

    def test_single_row_rejected(self):
        with self.assertRaises(InsufficientSamplesError):
            standardize([[1.0, 2.0]])

    def test_column_names_and_selectors(self):
        data = standardize(np.arange(12.0).reshape(4, 3), column_names=["x", "y", "z"])
        self.assertEqual(data.column_indices(["z", "0", 1]), (2, 0, 1))
        with self.assertRaises(UnknownColumnSelectorError):
            data.column_index("w")
        with self.assertRaises(UnknownColumnSelectorError):
            data.column_index(3)

    def test_values_are_read_only(self):
        data = standardize(np.arange(6.0).reshape(3, 2))
        with self.assertRaises(ValueError):
            data.values[0, 0] = 1.0


class WidthTest(SimpleTestCase):
    def test_single_pair(self):
        data = DataMatrix(values=[[0.0], [1.0]])
        self.assertEqual(median_width(data), 1.0)

    def test_zero_distances_fall_back(self):
        data = DataMatrix(values=[[0.0], [0.0], [0.0]])
        self.assertEqual(median_width(data), 1.0)

    def test_matches_brute_force_median(self):
        rng = np.random.default_rng(11)
        points = rng.standard_normal((5, 2))
        pairs = [np.linalg.norm(a - b) for a, b in itertools.combinations(points, 2)]
        self.assertEqual(len(pairs), 10)
        self.assertAlmostEqual(median_width(DataMatrix(values=points)), np.median(pairs))

    # only the deterministic prefix counts
    def test_subsample_prefix(self):
        values = np.concatenate([np.zeros((3, 1)), np.full((5, 1), 100.0)])
        data = DataMatrix(values=values)
        self.assertEqual(median_width(data, subsample_cap=3), 1.0)
        self.assertGreater(median_width(data, subsample_cap=8), 1.0)

    def test_empirical_width_rule(self):
        self.assertEqual(empirical_width(200), 0.8)
        self.assertEqual(empirical_width(201), 0.5)
        self.assertEqual(empirical_width(1200), 0.5)
        self.assertEqual(empirical_width(1300), 0.3)


class GaussianCenteredKernelTest(SimpleTestCase):
    def test_two_samples_structure(self):
        data = DataMatrix(values=[[0.3], [-1.2]])
        matrix = gaussian_centered_kernel(data, [0], 1.0).matrix
        c = matrix[0, 0]
        self.assertGreaterEqual(c, 0.0)
        np.testing.assert_allclose(matrix, [[c, -c], [-c, c]], atol=1e-15)

    def test_identical_rows_give_zero_kernel(self):
        data = DataMatrix(values=np.ones((4, 2)))
        kernel = gaussian_centered_kernel(data, [0, 1], 0.7)
        np.testing.assert_allclose(kernel.matrix, np.zeros((4, 4)), atol=1e-15)

    def test_matches_explicit_hkh(self):
        rng = np.random.default_rng(5)
        points = rng.standard_normal((4, 2))
        width = 0.9
        raw = np.array(
            [[np.exp(-np.sum((a - b) ** 2) / (2 * width**2)) for b in points] for a in points]
        )
        h = np.eye(4) - np.ones((4, 4)) / 4
        kernel = gaussian_centered_kernel(DataMatrix(values=points), [0, 1], width)
        np.testing.assert_allclose(kernel.matrix, h @ raw @ h, atol=1e-14)
        self.assertEqual(kernel.source_dims, 2)
        self.assertEqual(kernel.width, width)

    def test_kernel_invariants(self):
        rng = np.random.default_rng(7)
        data = standardize(rng.standard_normal((30, 3)))
        raw = gaussian_kernel_matrix(data.values, 1.3)
        self.assertTrue(np.all(raw > 0) and np.all(raw <= 1))
        np.testing.assert_array_equal(np.diag(raw), np.ones(30))

        matrix = gaussian_centered_kernel(data, [0, 1, 2], 1.3).matrix
        self.assertLess(np.max(np.abs(matrix - matrix.T)), 1e-12)
        self.assertLess(np.max(np.abs(matrix.sum(axis=1))), 1e-8)
        eigvals = np.linalg.eigvalsh(matrix)
        self.assertGreaterEqual(eigvals.min(), -1e-8 * eigvals.max())

    def test_centering_idempotent(self):
        rng = np.random.default_rng(8)
        once = random_psd_centered(rng, 12)
        self.assertLess(np.linalg.norm(center_kernel(once) - once), 1e-10)


class SpectralFeaturesTest(SimpleTestCase):
    def test_zero_kernel_has_no_components(self):
        features = spectral_features(CenteredKernel(matrix=np.zeros((5, 5))))
        self.assertEqual(features.m, 0)
        self.assertEqual(features.columns.shape, (5, 0))

    def test_rank_one(self):
        v = np.array([1.0, -1.0, 2.0, -2.0]) / np.sqrt(10)
        features = spectral_features(CenteredKernel(matrix=3.0 * np.outer(v, v)))
        self.assertEqual(features.m, 1)
        self.assertAlmostEqual(features.eigenvalues[0], 3.0, places=12)

    def test_reconstruction_bound(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            matrix = random_psd_centered(rng, 5, rank=3)
            features = spectral_features(CenteredKernel(matrix=matrix))
            all_eigs = np.clip(np.linalg.eigvalsh(matrix), 0, None)
            dropped = all_eigs[all_eigs < features.truncation]
            bound = np.sqrt(np.sum(dropped**2)) + 1e-8
            self.assertLessEqual(np.linalg.norm(matrix - features.reconstruct()), bound)
            self.assertTrue(np.all(np.diff(features.eigenvalues) <= 0))
            self.assertTrue(np.all(features.eigenvalues >= features.truncation))

    def test_trace_consistency(self):
        rng = np.random.default_rng(17)
        matrix = random_psd_centered(rng, 20)
        features = spectral_features(matrix, threshold=0.0)
        self.assertAlmostEqual(
            features.eigenvalues.sum() / np.trace(matrix), 1.0, delta=1e-8
        )


class CholeskyWithJitterTest(SimpleTestCase):
    def test_positive_definite_needs_no_jitter(self):
        _, jitter = cholesky_with_jitter(np.eye(3) * 2.0)
        self.assertEqual(jitter, 0.0)

    # a PSD matrix singular to roundoff is rescued by a tiny jitter
    def test_singular_psd_gets_jitter(self):
        v = np.ones((4, 1))
        _, jitter = cholesky_with_jitter(v @ v.T)
        self.assertGreater(jitter, 0.0)

    def test_indefinite_matrix_raises(self):
        with self.assertRaises(FactorizationError):
            cholesky_with_jitter(np.diag([1.0, -1.0]))
