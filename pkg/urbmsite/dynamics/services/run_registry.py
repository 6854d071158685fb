import json
from typing import Any, Dict, Iterable, Mapping, Optional
import logging

from django.db import DatabaseError, transaction
from django.utils import timezone

from dynamics.models import ExperimentRun, OutputArtifact

logger = logging.getLogger(__name__)


class RunRegistry:
    """
    Best-effort record of command runs and the files they emitted.
    A missing or broken database is logged and otherwise ignored: the
    registry never changes outputs or exit codes.
    """

    @staticmethod
    def start_run(experiment: str, config: Mapping[str, Any], seed: int, output_dir: str) -> Optional[ExperimentRun]:
        try:
            return ExperimentRun.objects.create(
                experiment=experiment,
                config=dict(config),
                seed=seed,
                output_dir=output_dir,
            )
        except DatabaseError as e:
            logger.warning("run registry unavailable, run not recorded: %s", e)
            return None

    @staticmethod
    def bulk_create_artifacts(
        run: ExperimentRun,
        manifest: Iterable[Mapping[str, Any]],
        batch_size: int = 500,
    ) -> int:
        objs = [
            OutputArtifact(
                run=run,
                file_name=entry["file"],
                sha256=entry.get("sha256"),
                size_bytes=entry.get("bytes"),
                deterministic=entry.get("deterministic", True),
            )
            for entry in manifest
        ]
        if objs:
            OutputArtifact.objects.bulk_create(objs, batch_size=batch_size)
        logger.debug("bulk_create_artifacts: %s objects", len(objs))
        return len(objs)

    @staticmethod
    def finish_run(
        run: Optional[ExperimentRun],
        exit_code: int,
        wall_time_s: float,
        metadata: Optional[Dict[str, Any]] = None,
        manifest: Iterable[Mapping[str, Any]] = (),
    ) -> None:
        """Store the outcome and artifact rows in one transaction."""
        if run is None:
            return
        run.status = ExperimentRun.STATUS_SUCCEEDED if exit_code == 0 else ExperimentRun.STATUS_FAILED
        run.exit_code = exit_code
        run.wall_time_s = wall_time_s
        # numpy scalars become plain JSON values
        run.metadata = json.loads(json.dumps(metadata or {}, default=str))
        run.finished_at = timezone.now()
        try:
            with transaction.atomic():
                run.save()
                RunRegistry.bulk_create_artifacts(run, manifest)
        except DatabaseError as e:
            logger.warning("run registry update failed for run %s: %s", run.pk, e)
