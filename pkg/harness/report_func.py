# harness/report_func.py
"""
Evaluation reports: aggregation, JSON emission, schema check and the
per-mode bar chart
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import pytz
from django.conf import settings
from django.core.exceptions import ValidationError
from PIL import Image, ImageDraw

from icsa.search_func import SUCCESS_IMAGE, SUCCESS_MULTIMODAL, SUCCESS_TEXT


logger = logging.getLogger(__name__)

REPORT_KEYS = (
    'config', 'asr_percent', 'attempted', 'successes_by_stage', 'mean_queries',
    'mean_image_iterations', 'samples', 'version', 'seed',
)
STAGE_KEYS = {SUCCESS_IMAGE: 'image', SUCCESS_TEXT: 'text', SUCCESS_MULTIMODAL: 'multimodal'}

# Excluded from reproducibility comparisons
VOLATILE_KEYS = ('generated_at',)


def asr_percent(successes, attempted):
    if attempted <= 0:
        return 0.0
    return round(100.0 * successes / attempted, 2)


@dataclass
class EvalReport:
    """
    One evaluation: the config echo and one entry per attacked sample
    (dataset index plus the serialized AttackResult).
    """
    config: dict
    seed: int
    samples: list = field(default_factory=list)
    version: str = ''
    generated_at: str = ''

    def __post_init__(self):
        self.version = self.version or settings.VERSION
        self.generated_at = self.generated_at or datetime.now(pytz.utc).isoformat()

    @property
    def attempted(self):
        return len(self.samples)

    @property
    def successes(self):
        return sum(1 for entry in self.samples if entry['status'] in STAGE_KEYS)

    @property
    def asr_percent(self):
        return asr_percent(self.successes, self.attempted)

    @property
    def successful_indices(self):
        return {entry['index'] for entry in self.samples if entry['status'] in STAGE_KEYS}

    @property
    def successes_by_stage(self):
        counts = {'image': 0, 'text': 0, 'multimodal': 0}
        for entry in self.samples:
            if entry['status'] in STAGE_KEYS:
                counts[STAGE_KEYS[entry['status']]] += 1
        return counts

    def _mean(self, key):
        if not self.samples:
            return 0.0
        return round(sum(entry[key] for entry in self.samples) / len(self.samples), 4)

    @property
    def mean_queries(self):
        return self._mean('queries_used')

    @property
    def mean_image_iterations(self):
        return self._mean('image_iterations_used')

    def to_dict(self):
        return {
            'config': self.config,
            'asr_percent': self.asr_percent,
            'attempted': self.attempted,
            'successes_by_stage': self.successes_by_stage,
            'mean_queries': self.mean_queries,
            'mean_image_iterations': self.mean_image_iterations,
            'samples': self.samples,
            'version': self.version,
            'seed': self.seed,
            'generated_at': self.generated_at,
        }

    @classmethod
    def from_dict(cls, data):
        validate_report(data)
        return cls(
            config=data['config'],
            seed=data['seed'],
            samples=data['samples'],
            version=data['version'],
            generated_at=data.get('generated_at', ''),
        )


def validate_report(data):
    """Raise ValidationError when ``data`` does not follow the report schema"""
    missing = [key for key in REPORT_KEYS if key not in data]
    if missing:
        raise ValidationError(f'Report is missing keys: {", ".join(missing)}')
    if not isinstance(data['samples'], list):
        raise ValidationError('samples must be a list')
    if data['attempted'] != len(data['samples']):
        raise ValidationError(f"attempted={data['attempted']} but {len(data['samples'])} samples listed")
    if not 0.0 <= data['asr_percent'] <= 100.0:
        raise ValidationError(f"asr_percent {data['asr_percent']} outside [0, 100]")
    stages = data['successes_by_stage']
    if set(stages) != {'image', 'text', 'multimodal'}:
        raise ValidationError(f'Unexpected stage keys {sorted(stages)}')
    if data['asr_percent'] != asr_percent(sum(stages.values()), data['attempted']):
        raise ValidationError('asr_percent does not match successes / attempted')
    for entry in data['samples']:
        for key in ('index', 'status', 'queries_used', 'image_iterations_used'):
            if key not in entry:
                raise ValidationError(f'Sample entry lacks {key}')
    return data


def strip_volatile(data):
    return {key: value for key, value in data.items() if key not in VOLATILE_KEYS}


def emit_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = validate_report(report.to_dict())
    with open(path, 'w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
    logger.info('Report written to %s (ASR %.2f%% over %s samples)', path, report.asr_percent, report.attempted)
    return path


def load_report(path):
    with open(path) as handle:
        return EvalReport.from_dict(json.load(handle))


def emit_table(rows, path, title=''):
    """Ablation or sweep table as JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as handle:
        json.dump({'title': title, 'rows': rows, 'version': settings.VERSION}, handle, indent=2)
    return path


def render_bar_chart(rows, path, value_key='asr_percent', label_key='mode', width=480, height=260):
    """Horizontal-axis bar chart of ``value_key`` (0-100) per row"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas = Image.new('RGB', (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    margin_left, margin_bottom, margin_top = 20, 40, 20
    plot_height = height - margin_bottom - margin_top
    slot = (width - 2 * margin_left) / max(len(rows), 1)
    draw.line([(margin_left, height - margin_bottom), (width - margin_left, height - margin_bottom)], fill=(0, 0, 0))
    for i, row in enumerate(rows):
        value = float(row[value_key])
        x1 = margin_left + i * slot + slot * 0.15
        x2 = margin_left + (i + 1) * slot - slot * 0.15
        y1 = height - margin_bottom - plot_height * min(max(value, 0.0), 100.0) / 100.0
        draw.rectangle([x1, y1, x2, height - margin_bottom], fill=(60, 110, 200))
        draw.text((x1, y1 - 12), f'{value:.1f}', fill=(0, 0, 0))
        draw.text((x1, height - margin_bottom + 6), str(row[label_key]), fill=(0, 0, 0))
    canvas.save(path)
    logger.info('Bar chart written to %s', path)
    return path
