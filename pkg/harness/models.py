# harness/models.py

from django.db import models


class EvaluationRun(models.Model):
    """
    One emitted evaluation report (``evaluate``, ``ablate`` or ``sweep``)
    """

    STRUCTURE_CHOICES = [
        ('encoder_only', 'Encoder-only'),
        ('encoder_decoder', 'Encoder-decoder'),
    ]

    mode = models.CharField(max_length=20, db_index=True)
    task_kind = models.CharField(max_length=30, db_index=True)
    structure = models.CharField(max_length=20, choices=STRUCTURE_CHOICES)
    seed = models.IntegerField(default=0)
    samples = models.PositiveIntegerField(default=0, help_text="Requested sample count")
    attempted = models.PositiveIntegerField(default=0, help_text="Correctly predicted samples attacked")
    asr_percent = models.FloatField(default=0.0)
    report_path = models.CharField(max_length=500)
    created_at = models.DateTimeField(auto_now_add=True, db_index=True)

    class Meta:
        verbose_name = "Evaluation Run"
        verbose_name_plural = "Evaluation Runs"
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['task_kind', 'mode'], name='idx_run_task_mode'),
        ]

    def __str__(self):
        return f"{self.mode} on {self.task_kind} ({self.asr_percent:.2f}%)"

    def to_dict(self):
        return {
            'id': self.id,
            'mode': self.mode,
            'task_kind': self.task_kind,
            'structure': self.structure,
            'seed': self.seed,
            'samples': self.samples,
            'attempted': self.attempted,
            'asr_percent': self.asr_percent,
            'report_path': self.report_path,
            'created_at': self.created_at.isoformat() if self.created_at else None,
        }
