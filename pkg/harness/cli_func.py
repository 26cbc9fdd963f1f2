# harness/cli_func.py
"""
Helpers shared by the management commands: common flags, checkpoint
locations and the dataset split seeds
"""

import logging
from pathlib import Path

from django.conf import settings

from bsa.budget import OPTIMIZERS, AttackBudget
from modelzoo.checkpoint_func import load_pretrained, load_task
from modelzoo.exceptions import ConfigurationError
from modelzoo.networks import STRUCTURES
from modelzoo.tasks import TASK_ALIASES, resolve_task_kind

from .dataset_func import synthesize_dataset
from .models import EvaluationRun


logger = logging.getLogger(__name__)

# Offsets keep the pre-training, fine-tuning, held-out and attack splits apart
PRETRAIN_SEED_OFFSET = 0
FINETUNE_SEED_OFFSET = 1000
HELDOUT_SEED_OFFSET = 2000
EVAL_SEED_OFFSET = 3000


def add_model_arguments(parser):
    parser.add_argument('--model', choices=STRUCTURES, default='encoder_only',
                        help='Model structure')
    parser.add_argument('--task', choices=sorted(TASK_ALIASES), default='classification',
                        help='Downstream task')
    parser.add_argument('--seed', type=int, default=0, help='Master seed')


def add_budget_arguments(parser):
    parser.add_argument('--sigma-i', type=float, default=None,
                        help='l-inf radius in [0, 1] units (default 16/255, 4/255 for grounding)')
    parser.add_argument('--sigma-s', type=float, default=None, help='Sentence similarity threshold')
    parser.add_argument('--steps', type=int, default=None, help='Total image iterations N')
    parser.add_argument('--init-steps', type=int, default=None, help='Single-modal image iterations N_s')
    parser.add_argument('--step-size', type=float, default=None, help='Signed-gradient step')
    parser.add_argument('--optimizer', choices=OPTIMIZERS, default='pgd')
    parser.add_argument('--hard-label', action='store_true', help='Hide confidence scores of the black box')


def add_evaluation_arguments(parser):
    parser.add_argument('--samples', type=int, default=None, help='Correctly predicted samples to attack')
    parser.add_argument('--pool', type=int, default=None,
                        help='Evaluation pool size (default: twice --samples)')
    parser.add_argument('--workers', type=int, default=None, help='Attack threads')
    parser.add_argument('--out', type=str, default=None, help='Output path')
    parser.add_argument('--no-progress', action='store_true', help='Disable the progress bar')


def task_kind_from_options(options):
    return resolve_task_kind(options['task'])


def budget_from_options(options, task_kind):
    return AttackBudget.from_settings(
        task_kind=task_kind,
        sigma_i=options.get('sigma_i'),
        sigma_s=options.get('sigma_s'),
        steps=options.get('steps'),
        init_steps=options.get('init_steps'),
        step_size=options.get('step_size'),
        optimizer=options.get('optimizer'),
    )


def sample_count_from_options(options):
    return options.get('samples') or settings.VLATTACK['EVAL_SAMPLES']


def workers_from_options(options):
    return options.get('workers') or settings.VLATTACK['WORKERS']


def checkpoint_paths(structure, task_kind, seed):
    directory = Path(settings.VLATTACK['CHECKPOINT_DIR'])
    return (
        directory / f'{structure}-pretrained-s{seed}.vlck',
        directory / f'{structure}-{task_kind}-s{seed}.vlck',
    )


def load_lab(structure, task_kind, seed):
    """Pretrained model F and fine-tuned task S written by ``train``"""
    pretrained_path, task_path = checkpoint_paths(structure, task_kind, seed)
    for path in (pretrained_path, task_path):
        if not path.exists():
            raise ConfigurationError(f'{path} not found, run "train --model {structure}" first')
    model = load_pretrained(pretrained_path)
    task = load_task(task_path)
    if task.structure != model.structure:
        raise ConfigurationError('Pretrained and task checkpoints have different structures')
    return model, task


def evaluation_dataset(task_kind, seed, size, image_size=32):
    return synthesize_dataset(task_kind, size, EVAL_SEED_OFFSET + seed, image_size)


def default_output(name):
    return Path(settings.VLATTACK['REPORT_DIR']) / name


def record_run(report, mode, structure, path, samples):
    run = EvaluationRun.objects.create(
        mode=mode,
        task_kind=report.config['task_kind'],
        structure=structure,
        seed=report.seed,
        samples=samples,
        attempted=report.attempted,
        asr_percent=report.asr_percent,
        report_path=str(path),
    )
    logger.info('Registered evaluation run %s', run.id)
    return run
