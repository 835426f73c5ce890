import json
import logging
from pathlib import Path
from typing import List, Optional

from django.core.management.base import BaseCommand, CommandError

from citest.services import ci_test
from kcit.exceptions import KcitError
from uitest.services import ui_test

from ..serializers import RunConfigSerializer, build_report
from ..services import ingest_csv

logger = logging.getLogger(__name__)

INVALID_CONFIG_EXIT_CODE = 6


def column_list(value: str) -> List[str]:
    """Comma-separated column selectors: names or 0-based indices."""
    return [item.strip() for item in value.split(",") if item.strip()]


def int_list(value: str) -> List[int]:
    return [int(item) for item in column_list(value)]


def float_list(value: str) -> List[float]:
    return [float(item) for item in column_list(value)]


class KcitCommand(BaseCommand):
    """
    Shared plumbing for the kcit commands.

    Subclasses implement ``run``; any ``KcitError`` becomes a
    ``CommandError`` carrying the error's exit code.
    """

    command_name = ""

    def add_common_arguments(self, parser, alpha_help: Optional[str] = None, timings: bool = True):
        parser.add_argument("--alpha", type=float, help=alpha_help or "Significance level (default 0.05).")
        parser.add_argument("--method", choices=["gamma", "mc", "both"], help="Null approximation.")
        parser.add_argument("--mc-draws", type=int, dest="mc_draws", help="Monte Carlo draws (>= 100).")
        parser.add_argument("--seed", type=int, help="Seed for every random draw.")
        parser.add_argument("--workers", type=int, help="Parallel workers; never changes results.")
        parser.add_argument("--out", help="Output file (default: stdout).")
        if timings:
            parser.add_argument(
                "--timings", action="store_true", help="Include wall-clock timings in the report."
            )

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except KcitError as e:
            logger.error(f"{self.command_name} failed: {e}")
            raise CommandError(str(e), returncode=e.exit_code) from e

    def run(self, **options):
        raise NotImplementedError

    def validate_run_config(self, **fields) -> RunConfigSerializer:
        serializer = RunConfigSerializer(data={"command": self.command_name, **fields})
        if not serializer.is_valid():
            raise CommandError(
                f"invalid options: {dict(serializer.errors)}", returncode=INVALID_CONFIG_EXIT_CODE
            )
        try:
            serializer.kci_config()
        except ValueError as e:
            raise CommandError(f"invalid configuration: {e}", returncode=INVALID_CONFIG_EXIT_CODE) from e
        return serializer

    def emit(self, text: str, out: Optional[str] = None) -> None:
        if out:
            path = Path(out)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
            logger.info(f"wrote {path}")
        else:
            self.stdout.write(text, ending="")

    def emit_json(self, payload: dict, out: Optional[str] = None) -> None:
        self.emit(json.dumps(payload, indent=2) + "\n", out)


class IndependenceTestCommand(KcitCommand):
    """test_ui / test_ci: read a CSV, run one test, emit a JSON report."""

    conditional = False

    def add_arguments(self, parser):
        parser.add_argument("csv", help="Input CSV with a header row.")
        parser.add_argument("--x", type=column_list, required=True, help="X columns, comma-separated.")
        parser.add_argument("--y", type=column_list, required=True, help="Y columns, comma-separated.")
        if self.conditional:
            parser.add_argument("--z", type=column_list, default=[], help="Conditioning columns.")
        self.add_common_arguments(parser)

    def run(self, **options):
        x, y, z = options["x"], options["y"], options.get("z") or []
        serializer = self.validate_run_config(
            x=x,
            y=y,
            z=z,
            alpha=options["alpha"],
            method=options["method"],
            mc_draws=options["mc_draws"],
            seed=options["seed"],
            workers=options["workers"],
            out=options["out"],
        )
        config = serializer.kci_config()

        dataset = ingest_csv(options["csv"], [*x, *y, *z])
        x_names, y_names, z_names = dataset.resolve(x), dataset.resolve(y), dataset.resolve(z)
        if self.conditional:
            report = ci_test(dataset.data, x_names, y_names, z_names, config)
        else:
            report = ui_test(dataset.data, x_names, y_names, config)

        arguments = {
            "csv": dataset.source,
            "x": x_names,
            "y": y_names,
            "alpha": config.alpha,
            "method": config.method,
            "mc_draws": config.mc_draws,
            "seed": config.seed,
            "dropped_rows": dataset.dropped_rows,
        }
        if self.conditional:
            arguments["z"] = z_names
        payload = build_report(self.command_name, arguments, report, options["timings"])
        payload["decision"] = {"alpha": config.alpha, "reject": bool(report.p_value < config.alpha)}
        self.emit_json(payload, options["out"])
