from django.db import models


class ExperimentRun(models.Model):
    """
    One invocation of the urbm_dyn command: the echoed config, seed, final
    status and the metadata written next to the outputs.
    """
    STATUS_RUNNING = "running"
    STATUS_SUCCEEDED = "succeeded"
    STATUS_FAILED = "failed"
    STATUS_CHOICES = [
        (STATUS_RUNNING, "Running"),
        (STATUS_SUCCEEDED, "Succeeded"),
        (STATUS_FAILED, "Failed"),
    ]

    experiment = models.CharField(max_length=32, db_index=True)
    config = models.JSONField(default=dict)
    seed = models.BigIntegerField(default=0)
    output_dir = models.CharField(max_length=500)

    status = models.CharField(max_length=16, choices=STATUS_CHOICES, default=STATUS_RUNNING)
    exit_code = models.SmallIntegerField(blank=True, null=True)
    wall_time_s = models.FloatField(blank=True, null=True)
    metadata = models.JSONField(default=dict)

    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(blank=True, null=True)

    class Meta:
        indexes = [
            models.Index(fields=["experiment", "seed"], name="run_experiment_seed_idx"),
        ]
        ordering = ["-created_at"]

    def __str__(self):
        return f"{self.experiment} seed={self.seed} ({self.status})"


class OutputArtifact(models.Model):
    """A file listed in a run's manifest.json."""
    run = models.ForeignKey(
        "ExperimentRun",
        on_delete=models.CASCADE,
        related_name="artifacts",
    )
    file_name = models.CharField(max_length=200)
    # null for files whose bytes depend on the wall clock
    sha256 = models.CharField(max_length=64, blank=True, null=True)
    size_bytes = models.BigIntegerField(blank=True, null=True)
    deterministic = models.BooleanField(default=True)

    class Meta:
        constraints = [
            models.UniqueConstraint(fields=["run", "file_name"], name="artifact_unique_per_run"),
        ]
        ordering = ["file_name"]

    def __str__(self):
        return self.file_name
