from django.contrib import admin
from .models import Checkpoint


@admin.register(Checkpoint)
class CheckpointAdmin(admin.ModelAdmin):
    list_display = ['name', 'structure', 'task_kind', 'seed', 'created_at']
    list_filter = ['structure', 'task_kind']
    search_fields = ['name', 'path']
    readonly_fields = ['created_at', 'updated_at']
