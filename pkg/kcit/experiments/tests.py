import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag

from kernels.services import standardize
from synth.services import PnlConfig, export_dataset, gen_pnl
from uitest.services import ui_test

from .serializers import RunConfigSerializer, TestReportSerializer, build_report
from .services import (
    CalibrationConfig,
    DagBenchConfig,
    EmptyDatasetError,
    InputFileNotFoundError,
    InvalidRunConfigError,
    UnknownColumnError,
    ingest_csv,
    run_calibration,
    run_dag_bench,
    summarize_trend,
)

SCHEMA_PATH = Path(__file__).resolve().parent / "schemas" / "test_report.schema.json"


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()

    def write_csv(self, name, text):
        path = self.tmp / name
        path.write_text(text)
        return path

    def write_frame(self, name, frame):
        path = self.tmp / name
        frame.to_csv(path, index=False)
        return path


def collider_frame(seed=0, n=300):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    x -= x.mean()
    y -= (y @ x) / (x @ x) * x
    z = x + y + 0.5 * rng.standard_normal(n)
    return pd.DataFrame({"X": x, "Y": y, "Z": z})


def run_command(name, *args):
    out = StringIO()
    call_command(name, *args, stdout=out)
    return out.getvalue()


class IngestCsvTest(TempDirMixin, SimpleTestCase):
    def test_three_rows(self):
        path = self.write_csv("small.csv", "a,b\n1,2\n2,4\n3,7\n")
        dataset = ingest_csv(path)
        self.assertEqual(dataset.data.n, 3)
        self.assertEqual(dataset.data.column_names, ("a", "b"))
        self.assertEqual(dataset.dropped_rows, 0)
        self.assertTrue(dataset.data.standardized)

    def test_missing_value_row_dropped(self):
        path = self.write_csv("na.csv", "a,b\n1,2\nNA,4\n3,7\n4,1\n")
        dataset = ingest_csv(path)
        self.assertEqual(dataset.data.n, 3)
        self.assertEqual(dataset.dropped_rows, 1)

    def test_only_selected_columns_count_for_deletion(self):
        path = self.write_csv("na.csv", "a,b,c\n1,2,x\n2,4,\n3,7,1\n")
        dataset = ingest_csv(path, ["a", "b"])
        self.assertEqual(dataset.data.n, 3)

    def test_index_selectors(self):
        path = self.write_csv("idx.csv", "a,b,c\n1,2,5\n2,4,1\n3,7,0\n")
        self.assertEqual(ingest_csv(path, ["2", 0]).data.column_names, ("c", "a"))

    def test_names_preferred_over_indices(self):
        path = self.write_csv("names.csv", "1,a\n1,2\n2,4\n3,7\n")
        self.assertEqual(ingest_csv(path, ["1"]).data.column_names, ("1",))

    def test_missing_file(self):
        with self.assertRaises(InputFileNotFoundError) as ctx:
            ingest_csv(self.tmp / "absent.csv")
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_unknown_column(self):
        path = self.write_csv("small.csv", "a,b\n1,2\n2,4\n")
        with self.assertRaises(UnknownColumnError) as ctx:
            ingest_csv(path, ["q"])
        self.assertEqual(ctx.exception.exit_code, 4)

    def test_no_rows_left(self):
        path = self.write_csv("empty.csv", "a,b\nNA,2\nx,4\n")
        with self.assertRaises(EmptyDatasetError) as ctx:
            ingest_csv(path)
        self.assertEqual(ctx.exception.exit_code, 5)

    def test_generated_dataset_round_trip(self):
        data = gen_pnl(PnlConfig(cond_dim=2, n=120, seed=9))
        path, _ = export_dataset(data, self.tmp / "pnl.csv", {"seed": 9})
        loaded = ingest_csv(path).data
        expected = standardize(data.values, data.column_names)
        self.assertEqual(loaded.column_names, expected.column_names)
        np.testing.assert_allclose(loaded.values, expected.values, atol=1e-9)


class RunConfigSerializerTest(SimpleTestCase):
    def validate(self, **fields):
        serializer = RunConfigSerializer(data={"command": "test-ci", "x": ["X"], "y": ["Y"], **fields})
        return serializer.is_valid(), serializer

    def test_defaults_accepted(self):
        valid, serializer = self.validate()
        self.assertTrue(valid, serializer.errors)
        self.assertEqual(serializer.kci_config().method, "gamma")

    def test_alpha_bounds(self):
        for alpha in (0.0, 1.0, -0.1):
            self.assertFalse(self.validate(alpha=alpha)[0])

    def test_mc_draws_floor(self):
        self.assertFalse(self.validate(mc_draws=99)[0])
        self.assertTrue(self.validate(mc_draws=100)[0])

    def test_overlapping_groups(self):
        self.assertFalse(self.validate(z=["X"])[0])

    def test_tests_need_both_groups(self):
        serializer = RunConfigSerializer(data={"command": "test-ui", "x": ["X"]})
        self.assertFalse(serializer.is_valid())

    def test_overrides_reach_config(self):
        valid, serializer = self.validate(method="both", mc_draws=300, seed=4, alpha=0.01)
        self.assertTrue(valid)
        config = serializer.kci_config()
        self.assertEqual((config.method, config.mc_draws, config.seed, config.alpha), ("both", 300, 4, 0.01))


class TestReportSerializerTest(SimpleTestCase):
    def ui_report(self):
        data = standardize(collider_frame(n=80).to_numpy(), ("X", "Y", "Z"))
        return ui_test(data, ["X"], ["Z"])

    def test_json_round_trip(self):
        payload = build_report("test-ui", {"x": ["X"], "y": ["Z"]}, self.ui_report())
        decoded = json.loads(json.dumps(payload))
        self.assertEqual(decoded, payload)
        serializer = TestReportSerializer(data=decoded)
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_timings_only_on_request(self):
        report = self.ui_report()
        self.assertNotIn("timings", build_report("test-ui", {}, report)["result"])
        self.assertIn("timings", build_report("test-ui", {}, report, include_timings=True)["result"])

    def test_required_schema_keys_present(self):
        schema = json.loads(SCHEMA_PATH.read_text())
        payload = build_report("test-ui", {}, self.ui_report())
        for key in schema["required"]:
            self.assertIn(key, payload)
        for key in schema["$defs"]["report"]["required"]:
            self.assertIn(key, payload["result"])

    def test_wrong_schema_version_rejected(self):
        payload = build_report("test-ui", {}, self.ui_report())
        payload["schema_version"] = "0.1"
        self.assertFalse(TestReportSerializer(data=payload).is_valid())


class TestCommandsTest(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.csv = self.write_frame("collider.csv", collider_frame())

    def test_ui_report(self):
        payload = json.loads(run_command("test_ui", str(self.csv), "--x", "X", "--y", "Z"))
        self.assertEqual(payload["command"], "test-ui")
        self.assertEqual(payload["result"]["test"], "unconditional")
        self.assertTrue(payload["decision"]["reject"])
        self.assertNotIn("timings", payload["result"])

    def test_ci_report_with_both_methods(self):
        output = run_command(
            "test_ci", str(self.csv), "--x", "X", "--y", "Y", "--z", "Z",
            "--method", "both", "--mc-draws", "500", "--seed", "3",
        )
        result = json.loads(output)["result"]
        self.assertEqual(result["test"], "conditional")
        self.assertEqual(set(result["p_values"]), {"gamma", "monte_carlo"})
        self.assertEqual(result["z_cols"], ["Z"])

    def test_ci_without_z_runs_unconditional(self):
        payload = json.loads(run_command("test_ci", str(self.csv), "--x", "0", "--y", "1"))
        self.assertEqual(payload["result"]["test"], "unconditional")
        self.assertEqual(payload["arguments"]["x"], ["X"])

    def test_seeded_output_is_byte_identical(self):
        args = ("test_ci", str(self.csv), "--x", "X", "--y", "Y", "--z", "Z", "--method", "mc", "--seed", "7")
        self.assertEqual(run_command(*args), run_command(*args))

    def test_timings_flag(self):
        payload = json.loads(run_command("test_ui", str(self.csv), "--x", "X", "--y", "Y", "--timings"))
        self.assertIn("total", payload["result"]["timings"])

    def test_out_file(self):
        out = self.tmp / "reports" / "ui.json"
        run_command("test_ui", str(self.csv), "--x", "X", "--y", "Y", "--out", str(out))
        self.assertEqual(json.loads(out.read_text())["command"], "test-ui")

    def test_exit_codes(self):
        cases = [
            ((str(self.tmp / "absent.csv"), "--x", "X", "--y", "Y"), 3),
            ((str(self.csv), "--x", "Q", "--y", "Y"), 4),
            ((str(self.csv), "--x", "X", "--y", "Y", "--alpha", "1.5"), 6),
            ((str(self.csv), "--x", "X", "--y", "X"), 6),
        ]
        for args, code in cases:
            with self.subTest(args=args):
                with self.assertRaises(CommandError) as ctx:
                    run_command("test_ui", *args)
                self.assertEqual(ctx.exception.returncode, code)

    def test_no_rows_exit_code(self):
        path = self.write_csv("bad.csv", "X,Y\nNA,1\n2,x\n")
        with self.assertRaises(CommandError) as ctx:
            run_command("test_ui", str(path), "--x", "X", "--y", "Y")
        self.assertEqual(ctx.exception.returncode, 5)


class PcCommandTest(TempDirMixin, SimpleTestCase):
    def test_collider_with_partial_correlation(self):
        csv = self.write_frame("collider.csv", collider_frame(n=500))
        dot = self.tmp / "graph.dot"
        payload = json.loads(run_command("pc", str(csv), "--oracle", "pcorr", "--dot", str(dot)))
        self.assertEqual(payload["result"]["directed"], [["X", "Z"], ["Y", "Z"]])
        self.assertEqual(payload["result"]["sepsets"], [{"pair": ["X", "Y"], "set": []}])
        self.assertIn('"X" -> "Z";', dot.read_text())
        self.assertTrue(TestReportSerializer(data=payload).is_valid())

    def test_kci_oracle_on_selected_columns(self):
        csv = self.write_frame("collider.csv", collider_frame(n=150))
        payload = json.loads(run_command("pc", str(csv), "--columns", "X,Z", "--oracle", "kci"))
        self.assertEqual(payload["result"]["nodes"], ["X", "Z"])
        self.assertEqual(payload["result"]["undirected"], [["X", "Z"]])


class GenCommandTest(TempDirMixin, SimpleTestCase):
    def test_pnl(self):
        out = self.tmp / "pnl.csv"
        run_command("gen", "pnl", "--out", str(out), "--cond-dim", "2", "--n", "40", "--dependent")
        frame = pd.read_csv(out)
        metadata = json.loads(out.with_suffix(".json").read_text())
        self.assertEqual(list(frame.columns), ["X", "Y", "Z1", "Z2"])
        self.assertEqual(len(frame), 40)
        self.assertFalse(metadata["ground_truth"]["conditionally_independent"])

    def test_dag(self):
        out = self.tmp / "dag.csv"
        run_command("gen", "dag", "--out", str(out), "--num-vars", "3", "--edge-prob", "1", "--n", "30")
        metadata = json.loads(out.with_suffix(".json").read_text())
        self.assertEqual(metadata["ground_truth"]["nodes"], ["X1", "X2", "X3"])
        self.assertEqual(len(metadata["ground_truth"]["undirected"]), 3)

    def test_invalid_config_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            run_command("gen", "pnl", "--out", str(self.tmp / "x.csv"), "--n", "5")
        self.assertEqual(ctx.exception.returncode, 6)


class CalibrationTest(SimpleTestCase):
    def small_config(self, **overrides):
        fields = dict(
            cases=("one_effective",), cond_dims=(1,), sample_sizes=(50,),
            alphas=(0.05,), replications=4, seed=2,
        )
        fields.update(overrides)
        return CalibrationConfig(**fields)

    def test_zero_replications_rejected(self):
        with self.assertRaises(InvalidRunConfigError):
            self.small_config(replications=0)

    def test_combined_method_rejected(self):
        with self.assertRaises(InvalidRunConfigError):
            self.small_config(methods=("gamma", "both"))

    def test_one_row_per_method(self):
        table = run_calibration(self.small_config(methods=("gamma", "mc")))
        self.assertEqual(list(table["method"]), ["gamma", "mc"])

    def test_table_shape(self):
        table = run_calibration(self.small_config(alphas=(0.01, 0.05)))
        self.assertEqual(len(table), 2)
        self.assertEqual(
            list(table.columns),
            ["case", "cond_dim", "n", "alpha", "method", "replications",
             "type_i_error", "type_ii_error", "mean_seconds"],
        )
        self.assertTrue(table["type_i_error"].between(0, 1).all())

    def test_workers_do_not_change_results(self):
        sequential = run_calibration(self.small_config()).drop(columns=["mean_seconds"])
        parallel = run_calibration(self.small_config(workers=2)).drop(columns=["mean_seconds"])
        pd.testing.assert_frame_equal(sequential, parallel)

    def test_command_writes_csv(self):
        output = run_command(
            "calibrate", "--cases", "one_effective", "--cond-dims", "1", "--sample-sizes", "50",
            "--alphas", "0.05", "--replications", "3",
        )
        frame = pd.read_csv(StringIO(output))
        self.assertEqual(len(frame), 1)
        self.assertNotIn("mean_seconds", frame.columns)

    def test_command_rejects_zero_replications(self):
        with self.assertRaises(CommandError) as ctx:
            run_command("calibrate", "--replications", "0")
        self.assertEqual(ctx.exception.returncode, 6)

    def test_command_rejects_combined_method(self):
        with self.assertRaises(CommandError) as ctx:
            run_command("calibrate", "--methods", "both", "--replications", "2")
        self.assertEqual(ctx.exception.returncode, 6)


class DagBenchTest(SimpleTestCase):
    def test_single_variable_rejected(self):
        with self.assertRaises(InvalidRunConfigError):
            DagBenchConfig(num_vars=1)

    def test_table_and_summary(self):
        table, summary = run_dag_bench(
            DagBenchConfig(num_vars=3, sample_sizes=(100, 200), num_dags=3, oracles=("pcorr",), seed=1)
        )
        self.assertEqual(list(table["n"]), [100, 200])
        self.assertTrue(table["recovery_rate"].between(0, 1).all())
        self.assertIn("nondecreasing_trend", summary["pcorr"])

    def test_trend_summary(self):
        rising = pd.DataFrame(
            {"n": [100, 300, 500], "oracle": ["kci"] * 3, "recovery_rate": [0.2, 0.4, 0.7]}
        )
        flat = pd.DataFrame(
            {"n": [100, 300, 500], "oracle": ["pcorr"] * 3, "recovery_rate": [0.5, 0.5, 0.5]}
        )
        summary = summarize_trend(pd.concat([rising, flat]))
        self.assertTrue(summary["kci"]["nondecreasing_trend"])
        self.assertAlmostEqual(summary["kci"]["spearman_rho"], 1.0)
        self.assertFalse(summary["pcorr"]["nondecreasing_trend"])
        self.assertIsNone(summary["pcorr"]["spearman_rho"])

    def test_command(self):
        output = run_command(
            "dag_bench", "--num-vars", "3", "--sample-sizes", "100", "--num-dags", "2",
            "--oracles", "pcorr",
        )
        self.assertTrue(output.startswith("n,oracle,num_dags,recovered,recovery_rate"))
        self.assertIn('"pcorr"', output)

    def test_command_rejects_one_variable(self):
        with self.assertRaises(CommandError) as ctx:
            run_command("dag_bench", "--num-vars", "1")
        self.assertEqual(ctx.exception.returncode, 6)


@tag("slow")
class ExperimentScaleTest(SimpleTestCase):
    def test_desk_scale_calibration(self):
        table = run_calibration(
            CalibrationConfig(
                cases=("one_effective",), cond_dims=(1,), sample_sizes=(200,),
                alphas=(0.05,), replications=300, seed=0,
            )
        )
        self.assertEqual(len(table), 1)
        self.assertTrue(0.02 <= table["type_i_error"].iloc[0] <= 0.1)

    def test_kernel_oracle_recovers_more_classes(self):
        table, _ = run_dag_bench(DagBenchConfig(sample_sizes=(700,), num_dags=100, seed=0))
        rates = dict(zip(table["oracle"], table["recovery_rate"]))
        self.assertGreaterEqual(rates["kci"], rates["pcorr"])

    def test_kernel_oracle_recovery_grows_with_sample_size(self):
        table, summary = run_dag_bench(
            DagBenchConfig(sample_sizes=(100, 400, 700), num_dags=40, alpha=0.01, seed=0)
        )
        self.assertEqual(len(table), 6)
        rates = {(row.oracle, row.n): row.recovery_rate for row in table.itertuples()}
        self.assertGreaterEqual(rates[("kci", 700)], rates[("pcorr", 700)])
        self.assertGreater(rates[("kci", 700)], rates[("kci", 100)])
        self.assertIn("kci", summary)
