import logging
import os

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from dynamics.services.config_loader import ExperimentConfigError, parse_config
from dynamics.services.errors import ContractViolation
from dynamics.services.experiments import EXIT_OK, EXIT_USAGE, dispatch
from dynamics.validators import EXPERIMENTS, parse_overrides

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    """
    Run one emulation experiment and write its CSV/JSON outputs.

    Examples:
      python manage.py urbm_dyn quench --config quench.json --out runs/quench
      python manage.py urbm_dyn ite --set model=heisenberg --set N=6 --seed 7
      python manage.py urbm_dyn open --workers 4 --no-progress
      python manage.py urbm_dyn circuit_check --set circuit.draws=10

    Exit codes: 0 success, 1 numerical or output failure (partial outputs
    are still written), 2 invalid config or size guard.
    """

    help = "Run an RBM/uRBM dynamics experiment and emit reproducible outputs."

    def add_arguments(self, parser):
        parser.add_argument("experiment", choices=EXPERIMENTS, help="Experiment to run")
        parser.add_argument("--config", help="JSON config file (dotted or nested keys)")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override one config key; repeatable, wins over --config",
        )
        parser.add_argument("--out", help="Output directory (default: urbm_runs/<experiment>)")
        parser.add_argument("--seed", type=int, help="Base seed (overrides the config)")
        parser.add_argument(
            "--workers",
            type=int,
            help="Worker processes (default: URBM_DYN_WORKERS or 1)",
        )
        parser.add_argument(
            "--no-progress",
            action="store_true",
            help="Disable progress bar output (CI-friendly)",
        )

    def handle(self, *args, **options):
        experiment = options["experiment"]
        out_dir = options["out"] or os.path.join("urbm_runs", experiment)
        show_progress = not options["no_progress"]

        try:
            overrides = parse_overrides(options["overrides"])
            config = parse_config(
                options["config"], overrides, experiment=experiment, seed=options["seed"]
            )
        except (ExperimentConfigError, ValidationError) as e:
            message = "; ".join(e.messages) if isinstance(e, ValidationError) else str(e)
            self.stderr.write(self.style.ERROR(f"Invalid config: {message}"))
            raise CommandError(message, returncode=EXIT_USAGE)

        logger.info(
            "Starting %s: N=%s M=%s seed=%s out=%s",
            experiment, config.N, config.M, config.seed, out_dir,
        )
        try:
            outcome = dispatch(config, out_dir, workers=options["workers"], show_progress=show_progress)
        except ContractViolation as e:
            self.stderr.write(self.style.ERROR(str(e)))
            raise CommandError(str(e), returncode=EXIT_USAGE)
        except Exception as e:
            logger.exception("Unexpected error during %s", experiment)
            self.stderr.write(self.style.ERROR(f"Unexpected error: {e}"))
            raise CommandError(str(e), returncode=1)

        if outcome.exit_code != EXIT_OK:
            self.stderr.write(self.style.ERROR(f"{experiment} failed: {outcome.error}"))
            raise CommandError(outcome.error, returncode=outcome.exit_code)

        self.stdout.write(
            self.style.SUCCESS(
                f"{experiment} finished in {outcome.metadata['wall_time_s']:.1f}s; "
                f"{len(outcome.manifest)} files in {out_dir}"
            )
        )
