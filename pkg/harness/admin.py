from django.contrib import admin
from .models import EvaluationRun


@admin.register(EvaluationRun)
class EvaluationRunAdmin(admin.ModelAdmin):
    list_display = ['mode', 'task_kind', 'structure', 'seed', 'attempted', 'asr_percent', 'created_at']
    list_filter = ['mode', 'task_kind', 'structure']
    search_fields = ['report_path']
    readonly_fields = ['created_at']
