import numpy as np
from django.test import SimpleTestCase, tag

from kcit.config import KciConfig
from kernels.services import (
    CenteredKernel,
    DataMatrix,
    center_kernel,
    gaussian_centered_kernel,
    median_width,
    spectral_features,
    standardize,
)
from nulldist.services import null_mean_var

from .serializers import UITestReportSerializer
from .services import (
    ColumnOverlapError,
    KernelSizeMismatchError,
    ui_null_spec,
    ui_statistic,
    ui_test,
)


def random_centered_psd(rng, n):
    factor = rng.standard_normal((n, n))
    return CenteredKernel(matrix=center_kernel(factor @ factor.T))


def unit(vector):
    vector = np.asarray(vector, dtype=float)
    return vector / np.linalg.norm(vector)


def median_kernels(data):
    kx = gaussian_centered_kernel(data, [0], median_width(data, [0]))
    ky = gaussian_centered_kernel(data, [1], median_width(data, [1]))
    return kx, ky


class UIStatisticTest(SimpleTestCase):
    def test_zero_factor(self):
        rng = np.random.default_rng(1)
        kx = random_centered_psd(rng, 5)
        self.assertEqual(ui_statistic(kx, CenteredKernel(matrix=np.zeros((5, 5)))), 0.0)

    def test_rank_one(self):
        v = unit([1.0, -2.0, 0.5, 0.5])
        kernel = CenteredKernel(matrix=2.5 * np.outer(v, v))
        self.assertAlmostEqual(ui_statistic(kernel, kernel), 2.5**2 / 4, places=12)

    def test_frobenius_oracle(self):
        rng = np.random.default_rng(2)
        kx, ky = random_centered_psd(rng, 4), random_centered_psd(rng, 4)
        expected = sum(
            kx.matrix[i, j] * ky.matrix[i, j] for i in range(4) for j in range(4)
        ) / 4
        self.assertAlmostEqual(ui_statistic(kx, ky), expected, places=12)
        self.assertAlmostEqual(
            ui_statistic(kx, ky), np.trace(kx.matrix @ ky.matrix) / 4, places=10
        )

    def test_symmetry_is_exact(self):
        rng = np.random.default_rng(3)
        kx, ky = random_centered_psd(rng, 9), random_centered_psd(rng, 9)
        self.assertEqual(ui_statistic(kx, ky), ui_statistic(ky, kx))

    def test_size_mismatch_rejected(self):
        with self.assertRaises(KernelSizeMismatchError):
            ui_statistic(CenteredKernel(np.zeros((3, 3))), CenteredKernel(np.zeros((4, 4))))


class UINullSpecTest(SimpleTestCase):
    def test_zero_kernel_gives_empty_weights(self):
        rng = np.random.default_rng(4)
        spec = ui_null_spec(random_centered_psd(rng, 6), CenteredKernel(np.zeros((6, 6))))
        self.assertEqual(spec.size, 0)

    def test_single_product(self):
        a, b = unit([1.0, -1.0, 0.0, 0.0]), unit([0.0, 0.0, 1.0, -1.0])
        spec = ui_null_spec(
            CenteredKernel(2.0 * np.outer(a, a)), CenteredKernel(3.0 * np.outer(b, b))
        )
        np.testing.assert_allclose(spec.weights, [6.0])
        self.assertAlmostEqual(spec.scale, 1 / 16)

    def test_product_spectrum_and_mean(self):
        basis = np.linalg.qr(np.random.default_rng(5).standard_normal((5, 5)))[0]
        u1, u2 = basis[:, 0], basis[:, 1]
        kx = CenteredKernel(2.0 * np.outer(u1, u1) + 1.0 * np.outer(u2, u2))
        ky = CenteredKernel(3.0 * np.outer(u1, u1) + 1.0 * np.outer(u2, u2))
        spec = ui_null_spec(kx, ky)
        np.testing.assert_allclose(sorted(spec.weights), [1.0, 2.0, 3.0, 6.0], atol=1e-10)
        mean, _ = null_mean_var(spec)
        self.assertAlmostEqual(mean, 12 / 25, places=10)
        self.assertAlmostEqual(mean, kx.trace() * ky.trace() / 25, places=10)


class UITraceIdentityTest(SimpleTestCase):
    # the statistic is the squared norm of the cross-covariance of the features
    def test_trace_identity_on_random_data(self):
        rng = np.random.default_rng(6)
        n = 30
        for _ in range(50):
            data = standardize(rng.standard_normal((n, 2)))
            kx, ky = median_kernels(data)
            psi = spectral_features(kx, threshold=0.0).columns
            phi = spectral_features(ky, threshold=0.0).columns
            cross = psi.T @ phi / np.sqrt(n)
            self.assertAlmostEqual(
                np.sum(cross**2) / ui_statistic(kx, ky), 1.0, delta=1e-6
            )

    def test_moments_match_trace_formulas(self):
        rng = np.random.default_rng(7)
        n = 40
        for _ in range(20):
            data = standardize(rng.standard_normal((n, 2)))
            kx, ky = median_kernels(data)
            mean, variance = null_mean_var(ui_null_spec(kx, ky, threshold=0.0))
            expected_mean = kx.trace() * ky.trace() / n**2
            expected_var = (
                2 * np.trace(kx.matrix @ kx.matrix) * np.trace(ky.matrix @ ky.matrix) / n**4
            )
            self.assertAlmostEqual(mean / expected_mean, 1.0, delta=1e-6)
            self.assertAlmostEqual(variance / expected_var, 1.0, delta=1e-6)

    def test_joint_row_permutation(self):
        rng = np.random.default_rng(8)
        values = rng.standard_normal((25, 2))
        before = ui_statistic(*median_kernels(standardize(values)))
        after = ui_statistic(*median_kernels(standardize(values[rng.permutation(25)])))
        self.assertAlmostEqual(before, after, delta=1e-10)


class UITestServiceTest(SimpleTestCase):
    def test_constant_x_is_degenerate(self):
        rng = np.random.default_rng(9)
        values = np.column_stack([np.full(50, 2.0), rng.standard_normal(50)])
        report = ui_test(DataMatrix(values=values), [0], [1])
        self.assertTrue(report.degenerate)
        self.assertEqual(report.statistic, 0.0)
        self.assertEqual(report.p_value, 1.0)

    def test_identical_columns_rejected_strongly(self):
        x = np.random.default_rng(10).standard_normal(400)
        report = ui_test(DataMatrix(values=np.column_stack([x, x])), [0], [1])
        self.assertLess(report.p_value, 0.01)

    def test_overwhelming_dependence_keeps_positive_p_value(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(800)
        values = np.column_stack([x, x + 1e-3 * rng.standard_normal(800)])
        report = ui_test(DataMatrix(values=values), [0], [1], KciConfig(method="both"))
        self.assertGreater(report.p_value, 0.0)
        self.assertLessEqual(report.p_value, 1e-10)
        self.assertTrue(all(0.0 < p <= 1.0 for p in report.p_values.values()))

        payload = UITestReportSerializer(report).data
        self.assertTrue(UITestReportSerializer(data=payload).is_valid())

    def test_null_moments_match_null_spec_of_same_kernels(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal(120)
        data = standardize(np.column_stack([x, np.sin(x) + 0.5 * rng.standard_normal(120)]))
        report = ui_test(data, [0], [1])
        kx = gaussian_centered_kernel(data, [0], median_width(data, [0]))
        ky = gaussian_centered_kernel(data, [1], median_width(data, [1]))
        mean, variance = null_mean_var(ui_null_spec(kx, ky))
        self.assertAlmostEqual(report.null_mean, mean, places=10)
        self.assertAlmostEqual(report.null_variance, variance, places=12)

    def test_zero_p_value_rejected_by_serializer(self):
        x = np.random.default_rng(12).standard_normal(60)
        report = ui_test(DataMatrix(values=np.column_stack([x, x])), [0], [1])
        payload = dict(UITestReportSerializer(report).data, p_value=0.0)
        serializer = UITestReportSerializer(data=payload)
        self.assertFalse(serializer.is_valid())
        self.assertIn("p_value", serializer.errors)

    def test_overlapping_columns_rejected(self):
        data = DataMatrix(values=np.random.default_rng(11).standard_normal((20, 3)))
        with self.assertRaises(ColumnOverlapError):
            ui_test(data, [0, 1], [1, 2])

    def test_both_methods_reported(self):
        rng = np.random.default_rng(12)
        data = DataMatrix(values=rng.standard_normal((80, 2)))
        report = ui_test(data, [0], [1], KciConfig(method="both", mc_draws=2000, seed=3))
        self.assertEqual(set(report.p_values), {"gamma", "monte_carlo"})
        self.assertEqual(report.method, "gamma")
        self.assertEqual(report.p_value, report.p_values["gamma"])
        self.assertTrue(0 < report.p_values["monte_carlo"] <= 1)

    def test_seeded_report_is_deterministic(self):
        rng = np.random.default_rng(13)
        data = DataMatrix(values=rng.standard_normal((60, 2)))
        config = KciConfig(method="mc", mc_draws=1000, seed=5)
        first, second = ui_test(data, [0], [1], config), ui_test(data, [0], [1], config)
        self.assertEqual(first.statistic, second.statistic)
        self.assertEqual(first.p_values, second.p_values)


@tag("slow")
class UICalibrationTest(SimpleTestCase):
    # rejection rate must sit in the binomial 99% band around alpha = 0.05
    def test_type_one_rate_independent_gaussians(self):
        rejections = 0
        for seed in range(300):
            values = np.random.default_rng(seed).standard_normal((400, 2))
            report = ui_test(DataMatrix(values=values), [0], [1])
            rejections += report.p_value < 0.05
        self.assertGreaterEqual(rejections / 300, 0.020)
        self.assertLessEqual(rejections / 300, 0.087)

    def test_identical_columns_always_rejected(self):
        for seed in range(20):
            x = np.random.default_rng(1000 + seed).standard_normal(400)
            report = ui_test(DataMatrix(values=np.column_stack([x, x])), [0], [1])
            self.assertLess(report.p_value, 0.01)
