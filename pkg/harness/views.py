# harness/views.py - EVALUATION RUNS (READ-ONLY JSON)

import json
import logging

from django.http import JsonResponse
from django.shortcuts import get_object_or_404
from django.views.decorators.http import require_GET

from .models import EvaluationRun


logger = logging.getLogger(__name__)


@require_GET
def run_list_view(request):
    """Registered runs, newest first; ``?task=`` and ``?mode=`` filter"""
    runs = EvaluationRun.objects.all()
    task_kind = request.GET.get('task')
    mode = request.GET.get('mode')
    if task_kind:
        runs = runs.filter(task_kind=task_kind)
    if mode:
        runs = runs.filter(mode=mode)
    return JsonResponse({
        'success': True,
        'count': runs.count(),
        'runs': [run.to_dict() for run in runs],
    })


@require_GET
def run_detail_view(request, run_id):
    run = get_object_or_404(EvaluationRun, pk=run_id)
    try:
        with open(run.report_path) as handle:
            report = json.load(handle)
    except (OSError, ValueError) as e:
        logger.error(f"Could not read report for run {run_id}: {e}")
        return JsonResponse({
            'success': False,
            'message': f'Report file unavailable: {run.report_path}',
            'run': run.to_dict(),
        }, status=404)
    return JsonResponse({
        'success': True,
        'run': run.to_dict(),
        'report': report,
    })
