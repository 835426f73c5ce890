import numpy as np
from django.test import SimpleTestCase, tag

from kcit.config import KciConfig
from kernels.services import (
    CenteredKernel,
    DataMatrix,
    EmpiricalFeatures,
    center_kernel,
    gaussian_centered_kernel,
    spectral_features,
    standardize,
)
from nulldist.services import null_mean_var
from synth.services import PnlConfig, gen_pnl
from uitest.services import ColumnOverlapError, KernelSizeMismatchError, ui_test

from .services import (
    GP_WIDTH_EXPONENTS,
    ResidualKernels,
    ci_null_moments,
    ci_null_spec,
    ci_statistic,
    ci_test,
    gp_log_marginal_likelihood,
    residual_projector,
    residualize,
    select_hyperparams,
    stacked_features,
    tune_regression_side,
)


def random_psd(rng, n, rank=None):
    factor = rng.standard_normal((n, rank or n))
    return CenteredKernel(matrix=center_kernel(factor @ factor.T))


def residual_pair(a, b):
    return ResidualKernels(
        kxz_given_z=CenteredKernel(a),
        ky_given_z=CenteredKernel(b),
        epsilon_f=1e-3,
        epsilon_g=1e-3,
        sigma_z_f=1.0,
        sigma_z_g=1.0,
    )


def kernels_for(data, z_dims=1):
    xz = [0] + list(range(2, 2 + z_dims))
    kxz = gaussian_centered_kernel(data, xz, 0.8)
    ky = gaussian_centered_kernel(data, [1], 0.8)
    kz = gaussian_centered_kernel(data, list(range(2, 2 + z_dims)), 0.4)
    return kxz, ky, kz


class ResidualProjectorTest(SimpleTestCase):
    def test_zero_kernel_gives_identity(self):
        projector = residual_projector(CenteredKernel(np.zeros((4, 4))), 1e-3)
        np.testing.assert_allclose(projector, np.eye(4), atol=1e-12)

    def test_rank_one_sherman_morrison(self):
        v = np.array([1.0, 2.0, -1.0]) / np.sqrt(6)
        lam, eps = 2.0, 0.5
        projector = residual_projector(CenteredKernel(lam * np.outer(v, v)), eps)
        expected = np.eye(3) - (lam / (lam + eps)) * np.outer(v, v)
        np.testing.assert_allclose(projector, expected, atol=1e-12)

    def test_residual_equation(self):
        rng = np.random.default_rng(1)
        kz = random_psd(rng, 4)
        projector = residual_projector(kz, 1e-3)
        np.testing.assert_allclose(
            projector @ (kz.matrix + 1e-3 * np.eye(4)), 1e-3 * np.eye(4), atol=1e-8
        )

    def test_spectrum_in_unit_interval(self):
        rng = np.random.default_rng(2)
        kz = random_psd(rng, 8)
        eigvals = np.linalg.eigvalsh(residual_projector(kz, 0.1))
        self.assertTrue(np.all(eigvals > 0))
        self.assertTrue(np.all(eigvals <= 1 + 1e-12))

    def test_large_epsilon_approaches_identity(self):
        rng = np.random.default_rng(3)
        kz = random_psd(rng, 6)
        projector = residual_projector(kz, 1e6)
        self.assertLess(np.max(np.abs(projector - np.eye(6))), 1e-4)


class ResidualizeTest(SimpleTestCase):
    def test_zero_conditioning_kernel_keeps_inputs(self):
        rng = np.random.default_rng(4)
        kxz, ky = random_psd(rng, 5), random_psd(rng, 5)
        res = residualize(kxz, ky, CenteredKernel(np.zeros((5, 5))), 1e-3, 1e-3)
        np.testing.assert_allclose(res.kxz_given_z.matrix, kxz.matrix, atol=1e-10)
        np.testing.assert_allclose(res.ky_given_z.matrix, ky.matrix, atol=1e-10)

    def test_zero_input_stays_zero(self):
        rng = np.random.default_rng(5)
        res = residualize(
            CenteredKernel(np.zeros((5, 5))), random_psd(rng, 5), random_psd(rng, 5), 1e-3, 1e-3
        )
        np.testing.assert_array_equal(res.kxz_given_z.matrix, np.zeros((5, 5)))

    def test_matches_triple_product(self):
        rng = np.random.default_rng(6)
        kxz, ky, kz, kz_g = (random_psd(rng, 5) for _ in range(4))
        res = residualize(kxz, ky, kz, 1e-2, 1e-1, kz_g=kz_g)
        r_f = 1e-2 * np.linalg.inv(kz.matrix + 1e-2 * np.eye(5))
        r_g = 1e-1 * np.linalg.inv(kz_g.matrix + 1e-1 * np.eye(5))
        np.testing.assert_allclose(res.kxz_given_z.matrix, r_f @ kxz.matrix @ r_f, atol=1e-8)
        np.testing.assert_allclose(res.ky_given_z.matrix, r_g @ ky.matrix @ r_g, atol=1e-8)
        self.assertEqual((res.epsilon_f, res.epsilon_g), (1e-2, 1e-1))

    def test_size_mismatch_rejected(self):
        rng = np.random.default_rng(7)
        with self.assertRaises(KernelSizeMismatchError):
            residualize(random_psd(rng, 4), random_psd(rng, 5), random_psd(rng, 4), 1e-3, 1e-3)

    # residual energy grows as the ridge smooths less
    def test_residual_trace_nondecreasing_in_epsilon(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            kxz, ky, kz = random_psd(rng, 10), random_psd(rng, 10), random_psd(rng, 10)
            traces = [
                residualize(kxz, ky, kz, eps, eps).kxz_given_z.trace() for eps in (1e-3, 1e-1, 10.0)
            ]
            self.assertTrue(traces[0] <= traces[1] + 1e-10 and traces[1] <= traces[2] + 1e-10)


class CIStatisticTest(SimpleTestCase):
    def test_zero_factor(self):
        rng = np.random.default_rng(9)
        res = residual_pair(random_psd(rng, 4).matrix, np.zeros((4, 4)))
        self.assertEqual(ci_statistic(res), 0.0)

    def test_aligned_rank_one(self):
        v = np.array([1.0, -1.0, 1.0, -1.0]) / 2
        res = residual_pair(2.0 * np.outer(v, v), 5.0 * np.outer(v, v))
        self.assertAlmostEqual(ci_statistic(res), 10.0 / 4, places=12)

    def test_frobenius_oracle(self):
        rng = np.random.default_rng(10)
        a, b = random_psd(rng, 4).matrix, random_psd(rng, 4).matrix
        expected = sum(a[i, j] * b[i, j] for i in range(4) for j in range(4)) / 4
        self.assertAlmostEqual(ci_statistic(residual_pair(a, b)), expected, delta=1e-10)


class CINullSpecTest(SimpleTestCase):
    def test_empty_features_give_empty_weights(self):
        rng = np.random.default_rng(11)
        res = residual_pair(random_psd(rng, 5).matrix, np.zeros((5, 5)))
        self.assertEqual(ci_null_spec(res).size, 0)

    def test_single_feature_each(self):
        rng = np.random.default_rng(12)
        psi = rng.standard_normal(6)
        phi = rng.standard_normal(6)
        res = residual_pair(np.outer(psi, psi), np.outer(phi, phi))
        spec = ci_null_spec(res)
        self.assertEqual(spec.size, 1)
        self.assertAlmostEqual(spec.weights[0], np.sum(psi**2 * phi**2), places=8)
        self.assertAlmostEqual(spec.scale, 1 / 6)

    # both Gram orderings share the nonzero spectrum
    def test_dual_gram_spectrum(self):
        rng = np.random.default_rng(13)
        psi = EmpiricalFeatures(rng.standard_normal((6, 2)), np.ones(2))
        phi = EmpiricalFeatures(rng.standard_normal((6, 2)), np.ones(2))
        w = stacked_features(psi, phi)
        self.assertEqual(w.shape, (6, 4))
        covariance_eigs = np.sort(np.linalg.eigvalsh(w.T @ w))
        gram_eigs = np.sort(np.linalg.eigvalsh(w @ w.T))[-4:]
        np.testing.assert_allclose(covariance_eigs, gram_eigs, atol=1e-9)

        res = residual_pair(psi.reconstruct(), phi.reconstruct())
        spec = ci_null_spec(res)
        np.testing.assert_allclose(np.sort(spec.weights), covariance_eigs, rtol=1e-8)

    def test_moments_match_stacked_traces(self):
        rng = np.random.default_rng(14)
        n = 40
        for _ in range(20):
            data = standardize(rng.standard_normal((n, 3)))
            kxz, ky, kz = kernels_for(data)
            res = residualize(kxz, ky, kz, 1e-3, 1e-3)
            w = stacked_features(
                spectral_features(res.kxz_given_z, 0.0), spectral_features(res.ky_given_z, 0.0)
            )
            mean, variance = null_mean_var(ci_null_spec(res, threshold=0.0))
            direct_mean = np.trace(w @ w.T) / n
            direct_var = 2 * np.trace((w @ w.T) @ (w @ w.T)) / n**2
            self.assertAlmostEqual(mean / direct_mean, 1.0, delta=1e-6)
            self.assertAlmostEqual(variance / direct_var, 1.0, delta=1e-6)
            moments = ci_null_moments(w)
            self.assertAlmostEqual(moments[0] / direct_mean, 1.0, delta=1e-6)
            self.assertAlmostEqual(moments[1] / direct_var, 1.0, delta=1e-6)

    def test_trace_identity_after_residualization(self):
        rng = np.random.default_rng(15)
        n = 30
        for _ in range(20):
            data = standardize(rng.standard_normal((n, 3)))
            res = residualize(*kernels_for(data), 1e-3, 1e-3)
            psi = spectral_features(res.kxz_given_z, 0.0).columns
            phi = spectral_features(res.ky_given_z, 0.0).columns
            cross = psi.T @ phi / np.sqrt(n)
            self.assertAlmostEqual(np.sum(cross**2) / ci_statistic(res), 1.0, delta=1e-6)


class SelectHyperparamsTest(SimpleTestCase):
    def test_small_conditioning_set_defaults(self):
        data = standardize(np.random.default_rng(16).standard_normal((100, 3)))
        params = select_hyperparams(data, [0, 2], [1], [2])
        self.assertEqual(params.base_width, 0.8)
        self.assertEqual(params.epsilon_f, 1e-3)
        self.assertEqual(params.epsilon_g, 1e-3)
        self.assertAlmostEqual(params.sigma_z_f, 0.4)
        self.assertAlmostEqual(params.sigma_z_f, 0.5 * params.base_width)
        self.assertFalse(params.gp_tuned)

    # the two-column Ẍ kernel and the one-column Y kernel share one width
    def test_shared_width_with_half_width_conditioning_kernel(self):
        data = standardize(np.random.default_rng(16).standard_normal((100, 3)))
        params = select_hyperparams(data, [0, 2], [1], [2])
        self.assertAlmostEqual(params.width_xz, 0.8)
        self.assertAlmostEqual(params.width_y, 0.8)
        self.assertAlmostEqual(params.sigma_z_f, 0.5 * params.width_xz)
        self.assertAlmostEqual(params.sigma_z_g, 0.5 * params.width_y)

        wide = standardize(np.random.default_rng(18).standard_normal((300, 4)))
        params = select_hyperparams(wide, [0, 2], [1, 3], [2])
        self.assertAlmostEqual(params.width_xz, 0.5)
        self.assertEqual(params.width_xz, params.width_y)
        self.assertAlmostEqual(params.sigma_z_g, 0.25)

    def test_large_conditioning_set_uses_gp(self):
        data = standardize(np.random.default_rng(17).standard_normal((80, 5)))
        params = select_hyperparams(data, [0, 2, 3, 4], [1], [2, 3, 4])
        self.assertTrue(params.gp_tuned)
        self.assertIsNotNone(params.log_marginal_likelihood_f)

    # the grid search recovers the width the outputs were drawn with
    def test_gp_search_recovers_generating_width(self):
        hits = 0
        base = 1.0
        for trial in range(50):
            rng = np.random.default_rng(100 + trial)
            z = rng.standard_normal((120, 3))
            exponent = int(rng.integers(-1, 3))
            sigma_true = base * 2.0**exponent
            sq = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
            kz = center_kernel(np.exp(-sq / (2 * sigma_true**2)))
            chol = np.linalg.cholesky(kz + 1e-2 * np.eye(120))
            outputs = chol @ rng.standard_normal((120, 8))
            selection = tune_regression_side(z, outputs, base)
            hits += abs(np.log2(selection.sigma / sigma_true)) <= 1.0
        self.assertGreaterEqual(hits, 40)
        self.assertIn(0, GP_WIDTH_EXPONENTS)

    def test_marginal_likelihood_prefers_true_noise(self):
        rng = np.random.default_rng(18)
        outputs = np.sqrt(0.1) * rng.standard_normal((60, 4))
        zero = np.zeros((60, 60))
        self.assertGreater(
            gp_log_marginal_likelihood(zero, outputs, 0.1),
            gp_log_marginal_likelihood(zero, outputs, 1e-4),
        )


class CITestServiceTest(SimpleTestCase):
    def test_empty_z_dispatches_to_unconditional(self):
        rng = np.random.default_rng(19)
        data = DataMatrix(values=rng.standard_normal((60, 2)))
        config = KciConfig(method="both", mc_draws=500, seed=1)
        report = ci_test(data, [0], [1], [], config)
        expected = ui_test(data, [0], [1], config)
        self.assertEqual(report.test, "unconditional")
        self.assertEqual(report.statistic, expected.statistic)
        self.assertEqual(report.p_values, expected.p_values)

    def test_overlap_rejected(self):
        data = DataMatrix(values=np.random.default_rng(20).standard_normal((30, 3)))
        with self.assertRaises(ColumnOverlapError):
            ci_test(data, [0], [1], [1, 2])

    def test_constant_z_is_flagged(self):
        rng = np.random.default_rng(21)
        values = np.column_stack([rng.standard_normal((50, 2)), np.ones(50)])
        report = ci_test(DataMatrix(values=values), [0], [1], [2])
        self.assertTrue(report.z_degenerate)
        self.assertTrue(0 < report.p_value <= 1)

    def test_report_fields(self):
        data = gen_pnl(PnlConfig(cond_dim=2, n=150, seed=3))
        report = ci_test(data, ["X"], ["Y"], ["Z1", "Z2"], KciConfig(method="both", mc_draws=1000))
        self.assertEqual(report.cond_dim, 2)
        self.assertEqual(report.z_cols, ("Z1", "Z2"))
        self.assertGreaterEqual(report.statistic, 0.0)
        self.assertGreater(report.retained_null_weights, 0)
        self.assertEqual(set(report.p_values), {"gamma", "monte_carlo"})

    def test_seeded_report_is_deterministic(self):
        data = gen_pnl(PnlConfig(cond_dim=1, n=100, seed=4))
        config = KciConfig(method="mc", mc_draws=1000, seed=2)
        first = ci_test(data, ["X"], ["Y"], ["Z1"], config)
        second = ci_test(data, ["X"], ["Y"], ["Z1"], config)
        self.assertEqual((first.statistic, first.p_values), (second.statistic, second.p_values))


def rejection_rate(case, cond_dim, n, dependent, replications, method="gamma"):
    config = KciConfig(method=method, mc_draws=2000)
    rejections = 0
    for rep in range(replications):
        data = gen_pnl(
            PnlConfig(case=case, dependent=dependent, cond_dim=cond_dim, n=n, seed=10_000 * cond_dim + rep)
        )
        z_cols = [f"Z{i + 1}" for i in range(cond_dim)]
        report = ci_test(data, ["X"], ["Y"], z_cols, config.with_overrides(seed=rep))
        rejections += report.p_value < 0.05
    return rejections / replications


@tag("slow")
class CICalibrationTest(SimpleTestCase):
    # Type I error within the binomial band; Gamma may run a little hot
    def test_type_one_error(self):
        for case in ("one_effective", "all_effective"):
            for cond_dim in (1, 3):
                for n in (200, 400):
                    rate = rejection_rate(case, cond_dim, n, dependent=False, replications=300)
                    self.assertGreaterEqual(rate, 0.020, msg=f"{case} D={cond_dim} n={n}")
                    self.assertLessEqual(rate, 0.10, msg=f"{case} D={cond_dim} n={n}")

    def test_power_with_shared_variable(self):
        self.assertGreaterEqual(rejection_rate("one_effective", 1, 400, True, 100), 0.95)
        for cond_dim in (1, 3):
            small = rejection_rate("one_effective", cond_dim, 200, True, 100)
            large = rejection_rate("one_effective", cond_dim, 400, True, 100)
            # one replication of slack for 100-replication binomial noise near power 1
            self.assertGreaterEqual(large, small - 0.01)
