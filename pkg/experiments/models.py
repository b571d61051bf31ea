# experiments/models.py

import logging

from django.db import DatabaseError, models

logger = logging.getLogger(__name__)


class ExperimentRun(models.Model):
    """
    One invocation of a workbench subcommand
    """
    COMMAND_CHOICES = (
        ('fit', 'Fit'),
        ('synth', 'Synthesize'),
        ('simulate', 'Simulate'),
        ('verify', 'Verify'),
        ('export', 'Export'),
    )

    STATUS_CHOICES = (
        ('running', 'Running'),
        ('succeeded', 'Succeeded'),
        ('failed', 'Failed'),
        ('negative', 'Verification negative'),
    )

    command = models.CharField(max_length=20, choices=COMMAND_CHOICES)
    preset = models.CharField(max_length=50, blank=True)
    seed = models.IntegerField(null=True, blank=True)
    config_hash = models.CharField(max_length=64, blank=True)
    out_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    exit_code = models.IntegerField(null=True, blank=True)
    manifest = models.JSONField(default=dict, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        db_table = 'experiment_run'
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['command', 'status'], name='exprun_command_status_idx'),
            models.Index(fields=['config_hash'], name='exprun_config_hash_idx'),
        ]

    def __str__(self):
        return f"{self.command} #{self.pk} ({self.status})"

    @property
    def is_finished(self):
        return self.status != 'running'

    @classmethod
    def start(cls, command, out_dir, preset='', seed=None, config_hash=''):
        """
        Record a new run. Returns None when the registry table is unavailable.
        """
        try:
            return cls.objects.create(
                command=command,
                out_dir=str(out_dir),
                preset=preset or '',
                seed=seed,
                config_hash=config_hash or '',
            )
        except DatabaseError as exc:
            logger.warning("run registry unavailable (%s); continuing without it", exc)
            return None

    def finish(self, status, exit_code, manifest=None, config_hash=None):
        self.status = status
        self.exit_code = exit_code
        if manifest is not None:
            self.manifest = manifest
        if config_hash:
            self.config_hash = config_hash
        try:
            self.save()
        except DatabaseError as exc:
            logger.warning("could not update run %s: %s", self.pk, exc)
