from unittest import mock

import numpy as np
from django.db import DatabaseError
from django.test import TestCase

from dynamics.models import ExperimentRun, OutputArtifact
from dynamics.services.run_registry import RunRegistry


MANIFEST = [
    {"file": "metadata.json", "sha256": None, "bytes": None, "deterministic": False},
    {"file": "series.csv", "sha256": "ab" * 32, "bytes": 120, "deterministic": True},
]


class RunRegistryTests(TestCase):
    def test_start_and_finish(self):
        run = RunRegistry.start_run("quench", {"model.N": 8}, 3, "runs/quench")
        self.assertEqual(run.status, ExperimentRun.STATUS_RUNNING)

        RunRegistry.finish_run(run, 0, 1.25, {"min_fidelity": np.float64(0.99), "ite_sign": np.int64(-1)}, MANIFEST)

        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.STATUS_SUCCEEDED)
        self.assertEqual(run.exit_code, 0)
        self.assertEqual(run.wall_time_s, 1.25)
        self.assertIsNotNone(run.finished_at)
        self.assertAlmostEqual(run.metadata["min_fidelity"], 0.99)
        self.assertEqual(run.config, {"model.N": 8})

        artifacts = list(run.artifacts.all())
        self.assertEqual([a.file_name for a in artifacts], ["metadata.json", "series.csv"])
        self.assertIsNone(artifacts[0].sha256)
        self.assertFalse(artifacts[0].deterministic)
        self.assertEqual(artifacts[1].size_bytes, 120)

    def test_failed_run(self):
        run = RunRegistry.start_run("open", {}, 0, "runs/open")
        RunRegistry.finish_run(run, 2, 0.1)
        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.STATUS_FAILED)
        self.assertEqual(run.exit_code, 2)
        self.assertEqual(OutputArtifact.objects.count(), 0)

    def test_finish_without_run_is_a_no_op(self):
        RunRegistry.finish_run(None, 0, 0.0, {}, MANIFEST)
        self.assertEqual(OutputArtifact.objects.count(), 0)

    def test_unavailable_database_is_logged(self):
        with mock.patch.object(ExperimentRun.objects, "create", side_effect=DatabaseError("no table")):
            with self.assertLogs("dynamics.services.run_registry", level="WARNING"):
                self.assertIsNone(RunRegistry.start_run("ite", {}, 0, "runs/ite"))

    def test_failed_update_is_logged(self):
        run = RunRegistry.start_run("ite", {}, 0, "runs/ite")
        with mock.patch.object(RunRegistry, "bulk_create_artifacts", side_effect=DatabaseError("locked")):
            with self.assertLogs("dynamics.services.run_registry", level="WARNING"):
                RunRegistry.finish_run(run, 0, 1.0, {}, MANIFEST)
        self.assertEqual(ExperimentRun.objects.get(pk=run.pk).status, ExperimentRun.STATUS_RUNNING)
