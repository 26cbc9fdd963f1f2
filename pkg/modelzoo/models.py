# modelzoo/models.py

from django.db import models


class Checkpoint(models.Model):
    """
    Registry of checkpoint containers written by the ``train`` command
    """

    STRUCTURE_CHOICES = [
        ('encoder_only', 'Encoder-only'),
        ('encoder_decoder', 'Encoder-decoder'),
    ]
    TASK_CHOICES = [
        ('', 'Pretrained (no task)'),
        ('classification', 'Classification'),
        ('sequence_generation', 'Sequence generation'),
        ('grounding', 'Grounding'),
    ]

    name = models.CharField(max_length=120, unique=True)
    path = models.CharField(max_length=500, help_text="Checkpoint container on disk")
    structure = models.CharField(max_length=20, choices=STRUCTURE_CHOICES, db_index=True)
    task_kind = models.CharField(max_length=30, choices=TASK_CHOICES, blank=True, default='', db_index=True)
    seed = models.IntegerField(null=True, blank=True)
    metrics = models.JSONField(default=dict, blank=True, help_text="Held-out metrics of fine-tuned tasks")
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        verbose_name = "Checkpoint"
        verbose_name_plural = "Checkpoints"
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['structure', 'task_kind'], name='idx_checkpoint_structure_task'),
        ]

    def __str__(self):
        return f"{self.name} ({self.get_structure_display()})"

    @property
    def is_pretrained(self):
        return not self.task_kind
