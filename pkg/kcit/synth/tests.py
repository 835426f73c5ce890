import json
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, tag
from scipy import stats

from causal.services import CiOracle, run_pc
from kernels.services import DataMatrix
from uitest.services import ui_test

from .services import (
    InvalidSynthConfigError,
    PnlConfig,
    RandomDagConfig,
    SmoothMixture,
    draw_noise,
    export_dataset,
    gen_pnl,
    gen_random_dag_data,
    pnl_metadata,
    random_smooth_mixture,
)


def residual_correlation(data: DataMatrix) -> float:
    """corr of X and Y residuals after a polynomial + tanh regression on Z."""
    z = data.values[:, 2:]
    basis = np.column_stack([np.ones(data.n), z, z**2, z**3, np.tanh(z)])
    residuals = []
    for col in (0, 1):
        coef, *_ = np.linalg.lstsq(basis, data.values[:, col], rcond=None)
        residuals.append(data.values[:, col] - basis @ coef)
    return float(np.corrcoef(*residuals)[0, 1])


class SmoothMixtureTest(SimpleTestCase):
    def test_identity_coefficients(self):
        grid = np.linspace(-3, 3, 11)
        np.testing.assert_allclose(SmoothMixture(1.0, 0.0, 0.0)(grid), grid)

    def test_vanishes_at_zero(self):
        for seed in range(20):
            self.assertEqual(random_smooth_mixture(seed)(0.0), 0.0)

    def test_nonnegative_coefficients_are_monotone(self):
        grid = np.linspace(-3, 3, 100)
        for seed in range(20):
            drawn = random_smooth_mixture(seed)
            f = SmoothMixture(abs(drawn.a), abs(drawn.b), abs(drawn.c))
            self.assertTrue(np.all(np.diff(f(grid)) > 0))

    def test_invertible_draws_are_strictly_monotone(self):
        grid = np.linspace(-3, 3, 100)
        for seed in range(50):
            f = random_smooth_mixture(seed, invertible=True)
            steps = np.diff(f(grid))
            self.assertTrue(np.all(steps > 0) or np.all(steps < 0))
            self.assertGreaterEqual(abs(f.a), 0.2)

    def test_deterministic_given_seed(self):
        self.assertEqual(random_smooth_mixture(7), random_smooth_mixture(7))


class NoiseTest(SimpleTestCase):
    def test_families_have_unit_variance(self):
        rng = np.random.default_rng(0)
        for family in ("gaussian", "uniform", "laplace"):
            self.assertAlmostEqual(draw_noise(rng, 200_000, family).var(), 1.0, delta=0.03)


class PnlConfigTest(SimpleTestCase):
    def test_rejects_bad_values(self):
        for kwargs in ({"cond_dim": 0}, {"n": 9}, {"case": "three"}, {"noise_family": "cauchy"}):
            with self.assertRaises(InvalidSynthConfigError):
                PnlConfig(**kwargs)


class GenPnlTest(SimpleTestCase):
    def test_columns_and_shape(self):
        data = gen_pnl(PnlConfig(case="all_effective", cond_dim=3, n=50, seed=1))
        self.assertEqual(data.column_names, ("X", "Y", "Z1", "Z2", "Z3"))
        self.assertEqual(data.values.shape, (50, 5))
        self.assertFalse(data.standardized)

    def test_bit_for_bit_deterministic(self):
        config = PnlConfig(dependent=True, cond_dim=2, n=80, seed=4)
        np.testing.assert_array_equal(gen_pnl(config).values, gen_pnl(config).values)

    def test_seed_changes_data(self):
        a = gen_pnl(PnlConfig(seed=1)).values
        b = gen_pnl(PnlConfig(seed=2)).values
        self.assertFalse(np.array_equal(a, b))

    def test_shared_variable_makes_residuals_correlated(self):
        hits = sum(
            residual_correlation(gen_pnl(PnlConfig(dependent=True, n=200, seed=seed))) > 0.1
            for seed in range(50)
        )
        self.assertGreaterEqual(hits, 45)

    def test_independent_case_residuals_centered_on_zero(self):
        values = [residual_correlation(gen_pnl(PnlConfig(n=200, seed=seed))) for seed in range(50)]
        self.assertLess(abs(np.mean(values)), 0.1)

    def test_ineffective_conditioning_columns_independent_of_x(self):
        p_values = []
        for seed in range(50):
            data = gen_pnl(PnlConfig(case="one_effective", cond_dim=3, n=100, seed=seed))
            p_values.append(ui_test(data, ["X"], ["Z2"]).p_value)
        self.assertGreater(stats.kstest(p_values, "uniform").pvalue, 0.01)


class RandomDagConfigTest(SimpleTestCase):
    def test_rejects_bad_values(self):
        for kwargs in (
            {"num_vars": 1},
            {"edge_prob": 1.5},
            {"kernel_weighting": "linear"},
            {"noise_sigma": 0.0},
        ):
            with self.assertRaises(InvalidSynthConfigError):
                RandomDagConfig(**kwargs)


class GenRandomDagDataTest(SimpleTestCase):
    def test_shapes_and_names(self):
        truth, data = gen_random_dag_data(RandomDagConfig(num_vars=5, n=60, seed=3))
        self.assertEqual(data.column_names, ("X1", "X2", "X3", "X4", "X5"))
        self.assertEqual(truth.nodes, data.column_names)
        self.assertEqual(data.values.shape, (60, 5))

    def test_deterministic(self):
        config = RandomDagConfig(n=100, seed=11)
        first_truth, first = gen_random_dag_data(config)
        second_truth, second = gen_random_dag_data(config)
        np.testing.assert_array_equal(first.values, second.values)
        self.assertEqual(first_truth.to_dict(), second_truth.to_dict())

    def test_no_edges_gives_empty_truth(self):
        truth, _ = gen_random_dag_data(RandomDagConfig(edge_prob=0.0, n=50))
        self.assertEqual(truth.skeleton(), set())

    def test_full_edges_on_two_nodes(self):
        truth, _ = gen_random_dag_data(RandomDagConfig(num_vars=2, edge_prob=1.0, n=50))
        self.assertEqual(truth.skeleton(), {frozenset({"X1", "X2"})})
        self.assertEqual(truth.directed, set())

    def test_amplitude_weighting_runs(self):
        _, data = gen_random_dag_data(
            RandomDagConfig(edge_prob=1.0, n=80, kernel_weighting="amplitude", seed=2)
        )
        self.assertTrue(np.all(np.abs(data.values) < 1e6))

    def test_values_stay_bounded(self):
        for seed in range(10):
            _, data = gen_random_dag_data(RandomDagConfig(edge_prob=1.0, n=200, seed=seed))
            self.assertTrue(np.all(np.abs(data.values) < 1e6))

    def test_pcorr_recovers_empty_graph(self):
        oracle = CiOracle(kind="partial_correlation", alpha=0.005)
        hits = 0
        for seed in range(100):
            _, data = gen_random_dag_data(RandomDagConfig(edge_prob=0.0, n=500, seed=seed))
            hits += not run_pc(data, oracle).skeleton()
        self.assertGreaterEqual(hits, 90)


@tag("slow")
class GenRandomDagPowerTest(SimpleTestCase):
    def test_single_edge_detected_by_kernel_test(self):
        rejections = 0
        for seed in range(100):
            _, data = gen_random_dag_data(
                RandomDagConfig(num_vars=2, edge_prob=1.0, n=300, seed=seed)
            )
            rejections += ui_test(data, ["X1"], ["X2"]).p_value < 0.05
        self.assertGreaterEqual(rejections, 95)


class ExportDatasetTest(SimpleTestCase):
    def test_csv_and_sidecar(self):
        config = PnlConfig(cond_dim=2, n=30, seed=5)
        data = gen_pnl(config)
        with tempfile.TemporaryDirectory() as tmp:
            csv_path, sidecar = export_dataset(data, Path(tmp) / "pnl.csv", pnl_metadata(config))
            frame = pd.read_csv(csv_path)
            metadata = json.loads(sidecar.read_text())

        self.assertEqual(list(frame.columns), ["X", "Y", "Z1", "Z2"])
        np.testing.assert_allclose(frame.to_numpy(), data.values, rtol=1e-12)
        self.assertEqual(metadata["seed"], 5)
        self.assertEqual(metadata["ground_truth"]["z"], ["Z1", "Z2"])
        self.assertTrue(metadata["ground_truth"]["conditionally_independent"])
