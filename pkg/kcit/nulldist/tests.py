import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from kcit.config import KciConfig

from .services import (
    MIN_P_VALUE,
    NullDistributionError,
    NullSpec,
    fit_gamma,
    fit_gamma_moments,
    null_mean_var,
    null_p_values,
    p_value_gamma,
    p_value_mc,
    simulate_null,
)


class NullSpecTest(SimpleTestCase):
    def test_single_chi_square(self):
        self.assertEqual(null_mean_var(NullSpec(weights=[1.0], scale=1.0)), (1.0, 2.0))

    def test_empty_mixture(self):
        self.assertEqual(null_mean_var(NullSpec(weights=[], scale=1.0)), (0.0, 0.0))

    # closed form, then a Monte Carlo cross-check within 3 standard errors
    def test_two_weights_with_scale(self):
        spec = NullSpec(weights=[2.0, 3.0], scale=0.5)
        mean, variance = null_mean_var(spec)
        self.assertAlmostEqual(mean, 2.5)
        self.assertAlmostEqual(variance, 6.5)

        draws = 200_000
        sample = simulate_null(spec, draws, rng_seed=1)
        self.assertLess(abs(sample.mean() - mean), 3 * np.sqrt(variance / draws))
        # var of the sample variance ~ (mu4 - sigma^4) / n, bounded loosely here
        self.assertLess(abs(sample.var() - variance), 0.05 * variance)

    def test_negative_weight_rejected(self):
        with self.assertRaises(NullDistributionError):
            NullSpec(weights=[1.0, -0.5])


class GammaFitTest(SimpleTestCase):
    def test_direct_formula(self):
        fit = fit_gamma_moments(2.0, 4.0)
        self.assertAlmostEqual(fit.k, 1.0)
        self.assertAlmostEqual(fit.theta, 2.0)
        self.assertFalse(fit.degenerate)

    def test_chi_square_one_is_gamma_half_two(self):
        fit = fit_gamma(NullSpec(weights=[1.0]))
        self.assertAlmostEqual(fit.k, 0.5)
        self.assertAlmostEqual(fit.theta, 2.0)

    def test_chi_square_three(self):
        fit = fit_gamma(NullSpec(weights=[1.0, 1.0, 1.0]))
        self.assertAlmostEqual(fit.k, 1.5)
        self.assertAlmostEqual(fit.theta, 2.0)
        for q in (0.5, 1.0, 3.0, 7.8, 12.0):
            self.assertAlmostEqual(
                stats.gamma.cdf(q, a=fit.k, scale=fit.theta), stats.chi2.cdf(q, 3), places=12
            )

    def test_empty_spec_is_degenerate(self):
        fit = fit_gamma(NullSpec(weights=[]))
        self.assertTrue(fit.degenerate)
        self.assertEqual(p_value_gamma(fit, 0.0), 1.0)
        self.assertEqual(p_value_gamma(fit, 0.1), 0.0)


class PValueGammaTest(SimpleTestCase):
    def test_zero_statistic_full_tail(self):
        self.assertEqual(p_value_gamma(fit_gamma_moments(3.0, 2.0), 0.0), 1.0)

    def test_chi_square_one_critical_value(self):
        fit = fit_gamma_moments(1.0, 2.0)
        critical = stats.chi2.ppf(0.95, 1)
        self.assertAlmostEqual(p_value_gamma(fit, 3.841459), 0.05, delta=1e-4)
        self.assertAlmostEqual(p_value_gamma(fit, critical), 0.05, delta=1e-10)

    def test_exponential_tail(self):
        fit = fit_gamma_moments(1.0, 1.0)
        self.assertAlmostEqual(p_value_gamma(fit, np.log(20.0)), 0.05, delta=1e-10)

    def test_monotone_in_statistic(self):
        fit = fit_gamma(NullSpec(weights=[0.7, 0.2, 0.05], scale=0.1))
        values = [p_value_gamma(fit, t) for t in np.linspace(0, 1, 50)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))


class PValueMonteCarloTest(SimpleTestCase):
    def test_empty_spec_positive_statistic(self):
        self.assertEqual(p_value_mc(NullSpec(weights=[]), 0.5, draws=99, rng_seed=0), 1 / 100)

    def test_empty_spec_zero_statistic_counts_ties(self):
        self.assertEqual(p_value_mc(NullSpec(weights=[]), 0.0, draws=99, rng_seed=0), 1.0)

    def test_chi_square_tail(self):
        p = p_value_mc(NullSpec(weights=[1.0]), 3.841, draws=200_000, rng_seed=2)
        self.assertAlmostEqual(p, 0.05, delta=0.005)

    def test_never_zero(self):
        p = p_value_mc(NullSpec(weights=[1.0]), 1e6, draws=100, rng_seed=4)
        self.assertEqual(p, 1 / 101)

    def test_deterministic_for_seed(self):
        spec = NullSpec(weights=[0.3, 0.2, 0.1], scale=0.5)
        self.assertEqual(
            p_value_mc(spec, 0.4, draws=5000, rng_seed=9),
            p_value_mc(spec, 0.4, draws=5000, rng_seed=9),
        )

    # sharded draws are fixed for a fixed worker count
    def test_sharded_deterministic(self):
        spec = NullSpec(weights=[0.3, 0.2, 0.1], scale=0.5)
        first = simulate_null(spec, 1001, rng_seed=9, workers=3)
        second = simulate_null(spec, 1001, rng_seed=9, workers=3)
        self.assertEqual(first.shape, (1001,))
        np.testing.assert_array_equal(first, second)


class GammaMonteCarloAgreementTest(SimpleTestCase):
    # the Gamma fit matches two moments, so tails agree closely
    def test_agreement_at_mc_quantiles(self):
        rng = np.random.default_rng(21)
        for trial in range(20):
            m = int(rng.integers(1, 30))
            weights = np.sort(rng.exponential(size=m) * 0.5 ** np.arange(m))[::-1]
            spec = NullSpec(weights=weights, scale=float(rng.uniform(0.01, 1.0)))
            sample = simulate_null(spec, 200_000, rng_seed=trial)
            fit = fit_gamma(spec)
            for q in (0.5, 0.9, 0.95):
                t = float(np.quantile(sample, q))
                gamma_p = p_value_gamma(fit, t)
                mc_p = p_value_mc(spec, t, draws=200_000, rng_seed=trial)
                self.assertLessEqual(abs(gamma_p - mc_p), 0.02, msg=f"trial {trial} q={q}")


class NullPValuesTest(SimpleTestCase):
    # far beyond the null the Gamma tail underflows to exactly 0
    def test_gamma_tail_floored_at_smallest_float(self):
        spec = NullSpec(weights=[0.5, 0.25], scale=0.01)
        self.assertEqual(p_value_gamma(fit_gamma(spec), 1e4), 0.0)
        p_values = null_p_values(1e4, KciConfig(method="both", mc_draws=200), spec=spec)
        self.assertEqual(p_values["gamma"], MIN_P_VALUE)
        self.assertGreater(p_values["monte_carlo"], 0.0)
        self.assertTrue(all(0.0 < p <= 1.0 for p in p_values.values()))

    def test_moderate_statistic_unchanged(self):
        spec = NullSpec(weights=[1.0], scale=1.0)
        p_values = null_p_values(3.841459, KciConfig(), spec=spec)
        self.assertAlmostEqual(p_values["gamma"], 0.05, delta=1e-4)
