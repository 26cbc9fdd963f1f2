# harness/eval_func.py
"""
Attack success rate over a dataset, the ablation ladder and the
iteration-budget sweep
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch
from django.conf import settings
from tqdm import tqdm

from blackbox.query_func import STAGE_IMAGE, STAGE_MULTIMODAL, is_adversarial, open_handle
from bsa.attack_func import BOTH_TERMS, FUSION_TERMS, IMAGE_TERMS, init_perturbation
from icsa.search_func import (
    FAILURE, SUCCESS_IMAGE, SUCCESS_MULTIMODAL, SUCCESS_TEXT, AttackRun, validate_trace, vlattack,
)
from modelzoo.exceptions import ConfigurationError, EvaluationError
from modelzoo.tasks import label_to_prediction
from text_attack.substitution_func import SubstitutionSpace

from .report_func import EvalReport


logger = logging.getLogger(__name__)

IE = 'IE'
TE = 'TE'
BSA = 'BSA'
BSA_BA = 'BSA+BA'
BSA_BA_Q = 'BSA+BA+Q'
VLATTACK = 'VLATTACK'
RANDOM_NOISE = 'RANDOM_NOISE'
MI_VARIANT = 'MI_VARIANT'
MODES = (IE, TE, BSA, BSA_BA, BSA_BA_Q, VLATTACK, RANDOM_NOISE, MI_VARIANT)
ABLATION_MODES = (IE, TE, BSA, BSA_BA, BSA_BA_Q, VLATTACK)

IMAGE_ONLY_TERMS = {IE: IMAGE_TERMS, TE: FUSION_TERMS, BSA: BOTH_TERMS}

# (N, N_s) grid of the iteration-budget sweep
SWEEP_GRID = (
    [(steps, steps // 2) for steps in (10, 20, 40, 80)]
    + [(40, init_steps) for init_steps in (5, 10, 20, 30, 40)]
)


@dataclass(frozen=True)
class EvalConfig:
    mode: str
    task_kind: str
    sample_count: int
    budget: object
    seed: int = 0
    hard_label: bool = False
    substitutions: int = 8
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"Unknown mode '{self.mode}', expected one of {MODES}")
        if self.sample_count <= 0:
            raise ConfigurationError('sample_count must be positive')
        if self.workers < 1:
            raise ConfigurationError('workers must be at least 1')

    @property
    def attack_budget(self):
        """MI_VARIANT runs the full attack with the momentum optimizer"""
        if self.mode == MI_VARIANT:
            return self.budget.with_changes(optimizer='mi')
        return self.budget

    def with_mode(self, mode):
        return replace(self, mode=mode)

    def to_dict(self):
        data = asdict(self)
        data['budget'] = self.attack_budget.to_dict()
        return data


def sample_seeds(master_seed, count):
    """Independent per-sample seeds from (master seed, sample index)"""
    return [int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0]) for index in range(count)]


def correctly_predicted(task, dataset, batch_size=128):
    """Indices of samples whose prediction matches the label"""
    vocab = task.vocab
    indices = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        predictions = task.predict(np.stack([s.image for s in chunk]), [vocab.encode(s.text) for s in chunk])
        for offset, (sample, prediction) in enumerate(zip(chunk, predictions)):
            truth = label_to_prediction(task.task_kind, sample.label)
            if not is_adversarial(prediction, truth, task.task_kind):
                indices.append(start + offset)
    return indices


def attack_sample(config, model, task, space, sample, seed):
    """Run ``config.mode`` on one sample and return its AttackResult"""
    budget = config.attack_budget
    text = model.vocab.encode(sample.text)
    image = torch.as_tensor(sample.image, dtype=model.dtype)
    handle = open_handle(task, image, text, budget, space.encoder, hard_label=config.hard_label)
    mode = config.mode

    if mode in (VLATTACK, MI_VARIANT):
        result = vlattack(model, handle, image, text, budget, seed, space=space, k=config.substitutions)
        return validate_trace(result, budget, image, text)

    run = AttackRun(model, handle, image, text, budget, seed)
    if mode == RANDOM_NOISE:
        adv_image = init_perturbation(image, budget.sigma_i, seed)
        flipped = run.query(adv_image, text, STAGE_IMAGE)
        run.log(STAGE_IMAGE, terms=None, flipped=flipped)
        result = run.finish(SUCCESS_IMAGE, adv_image, text) if flipped else run.finish(FAILURE)
        return validate_trace(result, budget, image, text)

    adv_image, flipped = run.image_stage(terms=IMAGE_ONLY_TERMS.get(mode, BOTH_TERMS))
    if flipped:
        return validate_trace(run.finish(SUCCESS_IMAGE, adv_image, text), budget, image, text)
    if mode in IMAGE_ONLY_TERMS:
        return validate_trace(run.finish(FAILURE), budget, image, text)

    outcome = run.text_stage(space, config.substitutions)
    if outcome.success:
        result = run.finish(SUCCESS_TEXT, run.image, outcome.adversarial_text)
        return validate_trace(result, budget, image, text)

    if mode == BSA_BA_Q:
        # Each ranked candidate against the fixed image-stage output
        for index, candidate in enumerate(outcome.candidates.ranked()):
            flipped = run.query(adv_image, candidate.text, STAGE_MULTIMODAL)
            run.log(STAGE_MULTIMODAL, candidate=index, refined=False, flipped=flipped,
                    similarity=candidate.similarity)
            if flipped:
                result = run.finish(SUCCESS_MULTIMODAL, adv_image, candidate.text, candidate_index=index)
                return validate_trace(result, budget, image, text, cross_queries=len(outcome.candidates))
        return validate_trace(run.finish(FAILURE), budget, image, text, cross_queries=len(outcome.candidates))

    return validate_trace(run.finish(FAILURE), budget, image, text)


def _entry(index, sample, result):
    entry = result.to_dict(original_image=sample.image)
    entry['index'] = index
    entry['text'] = sample.text
    return entry


def evaluate(config, model, task, dataset, indices=None, progress=True):
    """
    Attack the first ``config.sample_count`` correctly predicted samples
    of ``dataset``. Per-sample seeds depend only on the master seed and
    the sample index, so serial and threaded runs agree.
    """
    if task.task_kind != config.task_kind or dataset.task_kind != config.task_kind:
        raise ConfigurationError(
            f'Task {task.task_kind}, dataset {dataset.task_kind} and config {config.task_kind} disagree'
        )
    if indices is None:
        indices = correctly_predicted(task, dataset)[:config.sample_count]
    if not indices:
        raise EvaluationError('No correctly predicted samples to attack')
    seeds = sample_seeds(config.seed, len(dataset))
    space = SubstitutionSpace.from_model(model)

    def work(index):
        result = attack_sample(config, model, task, space, dataset[index], seeds[index])
        return _entry(index, dataset[index], result)

    logger.info('Evaluating %s on %s %s samples (seed=%s, workers=%s)',
                config.mode, len(indices), config.task_kind, config.seed, config.workers)
    bar = tqdm(total=len(indices), desc=config.mode, disable=not progress)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            entries = []
            for entry in pool.map(work, indices):
                entries.append(entry)
                bar.update(1)
    else:
        entries = []
        for index in indices:
            entries.append(work(index))
            bar.update(1)
    bar.close()

    report = EvalReport(config=config.to_dict(), seed=config.seed, samples=entries)
    logger.info('%s ASR %.2f%% (%s/%s)', config.mode, report.asr_percent, report.successes, report.attempted)
    return report


def run_ablation(model, task, dataset, budget, seed, sample_count=None, task_kind=None,
                 hard_label=False, workers=1, progress=True):
    """
    Evaluate IE, TE, BSA, BSA+BA, BSA+BA+Q and VLATTACK on the same
    samples and seeds. Returns (rows, reports by mode).
    """
    sample_count = sample_count or settings.VLATTACK['EVAL_SAMPLES']
    base = EvalConfig(
        mode=VLATTACK,
        task_kind=task_kind or task.task_kind,
        sample_count=sample_count,
        budget=budget,
        seed=seed,
        hard_label=hard_label,
        substitutions=settings.VLATTACK['SUBSTITUTIONS_PER_WORD'],
        workers=workers,
    )
    indices = correctly_predicted(task, dataset)[:sample_count]
    rows, reports = [], {}
    for mode in ABLATION_MODES:
        report = evaluate(base.with_mode(mode), model, task, dataset, indices=indices, progress=progress)
        reports[mode] = report
        rows.append({
            'mode': mode,
            'asr_percent': report.asr_percent,
            'attempted': report.attempted,
            'mean_queries': report.mean_queries,
        })
    check_containment(reports)
    return rows, reports


def check_containment(reports):
    """Success sets must grow along BSA, BSA+BA, VLATTACK"""
    ladder = [mode for mode in (BSA, BSA_BA, VLATTACK) if mode in reports]
    for smaller, larger in zip(ladder, ladder[1:]):
        missing = reports[smaller].successful_indices - reports[larger].successful_indices
        if missing:
            raise EvaluationError(f'{larger} misses samples {sorted(missing)} broken by {smaller}')


def run_sweep(model, task, dataset, budget, seed, sample_count=None, grid=SWEEP_GRID,
              hard_label=False, workers=1, progress=True):
    """Full attack ASR for every (N, N_s) in ``grid``"""
    sample_count = sample_count or settings.VLATTACK['EVAL_SAMPLES']
    indices = correctly_predicted(task, dataset)[:sample_count]
    rows = []
    for steps, init_steps in grid:
        config = EvalConfig(
            mode=VLATTACK,
            task_kind=task.task_kind,
            sample_count=sample_count,
            budget=budget.with_changes(steps=steps, init_steps=init_steps),
            seed=seed,
            hard_label=hard_label,
            substitutions=settings.VLATTACK['SUBSTITUTIONS_PER_WORD'],
            workers=workers,
        )
        report = evaluate(config, model, task, dataset, indices=indices, progress=progress)
        rows.append({
            'steps': steps,
            'init_steps': init_steps,
            'asr_percent': report.asr_percent,
            'mean_queries': report.mean_queries,
        })
        logger.info('sweep N=%s N_s=%s ASR=%.2f%%', steps, init_steps, report.asr_percent)
    return rows
