import json
from pathlib import Path

from ...services import DagBenchConfig, run_dag_bench
from ..base import KcitCommand, column_list, int_list


class Command(KcitCommand):
    help = (
        "How often PC recovers the Markov equivalence class of random DAGs, "
        "per sample size and CI oracle. Prints the recovery table as CSV and "
        "a trend summary as JSON."
    )

    command_name = "dag-bench"

    def add_arguments(self, parser):
        parser.add_argument("--num-vars", type=int, dest="num_vars", default=4)
        parser.add_argument("--edge-prob", type=float, dest="edge_prob", default=0.5)
        parser.add_argument("--sample-sizes", type=int_list, dest="sample_sizes", default=[100, 300, 500, 700])
        parser.add_argument("--num-dags", type=int, dest="num_dags", default=100)
        parser.add_argument("--oracles", type=column_list, default=["kci", "pcorr"])
        parser.add_argument("--max-cond", type=int, dest="max_cond")
        parser.add_argument(
            "--kernel-weighting", dest="kernel_weighting", choices=["inverse_length", "amplitude"],
            default="inverse_length",
        )
        self.add_common_arguments(parser, alpha_help="Significance level (default 0.01).", timings=False)

    def run(self, **options):
        serializer = self.validate_run_config(
            alpha=options["alpha"],
            method=options["method"],
            mc_draws=options["mc_draws"],
            seed=options["seed"],
            workers=options["workers"],
            max_cond=options["max_cond"],
            out=options["out"],
        )
        kci = serializer.kci_config()
        config = DagBenchConfig(
            num_vars=options["num_vars"],
            edge_prob=options["edge_prob"],
            sample_sizes=tuple(options["sample_sizes"]),
            num_dags=options["num_dags"],
            alpha=options["alpha"] if options["alpha"] is not None else 0.01,
            oracles=tuple(options["oracles"]),
            seed=kci.seed,
            workers=kci.workers,
            max_cond=options["max_cond"],
            kernel_weighting=options["kernel_weighting"],
            kci=kci,
        )
        table, summary = run_dag_bench(config)
        summary_text = json.dumps(summary, indent=2) + "\n"
        if options["out"]:
            out = Path(options["out"])
            self.emit(table.to_csv(index=False), str(out))
            self.emit(summary_text, str(out.with_suffix(".summary.json")))
        else:
            self.emit(table.to_csv(index=False))
            self.emit(summary_text)
