from django.db import models


class RunRecord(models.Model):
    """One invocation of a train or evaluate command"""
    STATUS_CHOICES = (
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('FAILED', 'Failed'),
    )

    name = models.CharField(max_length=255)
    command = models.CharField(max_length=50)
    output_dir = models.CharField(max_length=1024)
    config_hash = models.CharField(max_length=64, blank=True)
    seed = models.IntegerField(default=0)
    version = models.CharField(max_length=50)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='RUNNING')
    error = models.TextField(blank=True)
    metrics = models.JSONField(default=dict, blank=True)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.command} {self.name} ({self.status})"

    @property
    def is_finished(self):
        return self.status != 'RUNNING'
