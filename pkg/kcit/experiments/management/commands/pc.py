from causal.services import CiOracle, run_pc

from ...serializers import build_report
from ...services import ORACLE_ALIASES, ingest_csv
from ..base import KcitCommand, column_list


class Command(KcitCommand):
    help = (
        "Learn a CPDAG from a CSV with the PC algorithm. For real data with "
        "many variables a significance level of 0.001 is a common "
        "multiple-testing choice; it is not applied unless passed with --alpha."
    )

    command_name = "pc"

    def add_arguments(self, parser):
        parser.add_argument("csv", help="Input CSV with a header row.")
        parser.add_argument("--columns", type=column_list, help="Variables to use (default: all).")
        parser.add_argument("--oracle", choices=["kci", "pcorr"], default="kci")
        parser.add_argument("--max-cond", type=int, dest="max_cond", help="Largest conditioning set.")
        parser.add_argument("--dot", help="Also write the graph as DOT text to this file.")
        self.add_common_arguments(
            parser, alpha_help="Significance level (default 0.05; 0.001 suits real data).",
            timings=False,
        )

    def run(self, **options):
        serializer = self.validate_run_config(
            alpha=options["alpha"],
            method=options["method"],
            mc_draws=options["mc_draws"],
            seed=options["seed"],
            workers=options["workers"],
            max_cond=options["max_cond"],
            oracle=options["oracle"],
            out=options["out"],
        )
        config = serializer.kci_config()

        dataset = ingest_csv(options["csv"], options["columns"])
        oracle = CiOracle(kind=ORACLE_ALIASES[options["oracle"]], alpha=config.alpha, config=config)
        graph = run_pc(
            dataset.data, oracle, max_cond=options["max_cond"], workers=config.workers
        )

        arguments = {
            "csv": dataset.source,
            "columns": list(dataset.data.column_names),
            "oracle": options["oracle"],
            "alpha": config.alpha,
            "max_cond": options["max_cond"],
            "dropped_rows": dataset.dropped_rows,
        }
        if options["oracle"] == "kci":
            arguments.update(method=config.method, mc_draws=config.mc_draws, seed=config.seed)
        self.emit_json(build_report(self.command_name, arguments, graph), options["out"])
        if options["dot"]:
            self.emit(graph.to_dot(), options["dot"])
