from synth.services import (
    KERNEL_WEIGHTINGS,
    NOISE_FAMILIES,
    PNL_CASES,
    PnlConfig,
    RandomDagConfig,
    dag_metadata,
    export_dataset,
    gen_pnl,
    gen_random_dag_data,
    pnl_metadata,
)

from ..base import KcitCommand


class Command(KcitCommand):
    help = (
        "Generate a synthetic dataset: post-nonlinear CI data (pnl) or data "
        "over a random DAG (dag). Writes a CSV and a sidecar JSON with the "
        "config, seed and ground truth."
    )

    command_name = "gen"

    def add_arguments(self, parser):
        parser.add_argument("kind", choices=["pnl", "dag"])
        parser.add_argument("--out", required=True, help="CSV path; the sidecar gets a .json suffix.")
        parser.add_argument("--n", type=int, default=200, help="Sample size.")
        parser.add_argument("--seed", type=int, default=0)
        # pnl
        parser.add_argument("--case", choices=PNL_CASES, default=PNL_CASES[0])
        parser.add_argument("--dependent", action="store_true", help="Add a shared variable to X and Y.")
        parser.add_argument("--cond-dim", type=int, dest="cond_dim", default=1)
        parser.add_argument("--noise", choices=NOISE_FAMILIES, help="Noise family (default: random per draw).")
        # dag
        parser.add_argument("--num-vars", type=int, dest="num_vars", default=4)
        parser.add_argument("--edge-prob", type=float, dest="edge_prob", default=0.5)
        parser.add_argument(
            "--kernel-weighting", dest="kernel_weighting", choices=KERNEL_WEIGHTINGS,
            default=KERNEL_WEIGHTINGS[0],
        )

    def run(self, **options):
        self.validate_run_config(seed=options["seed"], out=options["out"])

        if options["kind"] == "pnl":
            config = PnlConfig(
                case=options["case"],
                dependent=options["dependent"],
                cond_dim=options["cond_dim"],
                n=options["n"],
                noise_family=options["noise"],
                seed=options["seed"],
            )
            data, metadata = gen_pnl(config), pnl_metadata(config)
        else:
            config = RandomDagConfig(
                num_vars=options["num_vars"],
                edge_prob=options["edge_prob"],
                n=options["n"],
                seed=options["seed"],
                kernel_weighting=options["kernel_weighting"],
            )
            truth, data = gen_random_dag_data(config)
            metadata = dag_metadata(config, truth)

        csv_path, sidecar = export_dataset(data, options["out"], metadata)
        self.emit_json({"csv": str(csv_path), "metadata": str(sidecar), "rows": data.n})
