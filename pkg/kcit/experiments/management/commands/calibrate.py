from synth.services import PNL_CASES

from ...services import CalibrationConfig, run_calibration
from ..base import KcitCommand, column_list, float_list, int_list


class Command(KcitCommand):
    help = (
        "Type I / Type II error rates of the conditional test on "
        "post-nonlinear data, one CSV row per (case, D, n, alpha, method)."
    )

    command_name = "calibrate"

    def add_arguments(self, parser):
        parser.add_argument("--cases", type=column_list, default=list(PNL_CASES))
        parser.add_argument("--cond-dims", type=int_list, dest="cond_dims", default=[1, 2, 3, 4, 5])
        parser.add_argument("--sample-sizes", type=int_list, dest="sample_sizes", default=[200, 400])
        parser.add_argument("--alphas", type=float_list, default=[0.01, 0.05])
        parser.add_argument("--methods", type=column_list, default=["gamma"])
        parser.add_argument("--replications", type=int, default=1000)
        self.add_common_arguments(parser)

    def run(self, **options):
        serializer = self.validate_run_config(
            mc_draws=options["mc_draws"],
            seed=options["seed"],
            workers=options["workers"],
            out=options["out"],
        )
        kci = serializer.kci_config()
        config = CalibrationConfig(
            cases=tuple(options["cases"]),
            cond_dims=tuple(options["cond_dims"]),
            sample_sizes=tuple(options["sample_sizes"]),
            alphas=tuple(options["alphas"]),
            methods=tuple(options["methods"]),
            replications=options["replications"],
            seed=kci.seed,
            workers=kci.workers,
            kci=kci,
        )
        table = run_calibration(config)
        if not options["timings"]:
            table = table.drop(columns=["mean_seconds"])
        self.emit(table.to_csv(index=False), options["out"])
