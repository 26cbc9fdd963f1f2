# icsa/search_func.py
"""
Multimodal level of the attack

Stage 1 perturbs the image alone (block-wise attack, N_s steps). Stage 2
perturbs the text alone on the clean image. If both fail, stage 3 walks the
similarity-ranked text candidates, pairing each with the current image and
refining that image for N_k steps; the image perturbation carries over from
one candidate to the next.
"""

import logging
from dataclasses import dataclass, field

import torch
from django.conf import settings

from blackbox.query_func import STAGE_IMAGE, STAGE_IMPORTANCE, STAGE_MULTIMODAL, STAGE_TEXT
from bsa.attack_func import BOTH_TERMS, bsa_attack, bsa_iterate, clean_features
from modelzoo.exceptions import ConfigurationError, EvaluationError
from text_attack.substitution_func import CandidateList, SubstitutionSpace, text_attack


logger = logging.getLogger(__name__)

SUCCESS_IMAGE = 'success_image'
SUCCESS_TEXT = 'success_text'
SUCCESS_MULTIMODAL = 'success_multimodal'
FAILURE = 'failure'
STATUSES = (SUCCESS_IMAGE, SUCCESS_TEXT, SUCCESS_MULTIMODAL, FAILURE)


@dataclass(frozen=True)
class SearchPlan:
    steps: int
    iterations_per_candidate: int
    ranked: CandidateList

    def validate(self, budget):
        if self.steps != len(self.ranked):
            raise ConfigurationError(f'Plan has {self.steps} steps but {len(self.ranked)} candidates')
        if self.steps * self.iterations_per_candidate > budget.multimodal_steps:
            raise ConfigurationError(
                f'Plan needs {self.steps * self.iterations_per_candidate} iterations, '
                f'budget leaves {budget.multimodal_steps}'
            )
        if self.steps == 0 and self.iterations_per_candidate:
            raise ConfigurationError('An empty plan cannot allocate iterations')
        return self


def compute_plan(candidates, budget):
    """
    K = min(|T|, N - N_s) steps, N_k = floor((N - N_s) / K) iterations each,
    over the top-K candidates by similarity. Leftover iterations are dropped.
    """
    remaining = budget.multimodal_steps
    steps = min(len(candidates), remaining)
    per_candidate = remaining // steps if steps else 0
    ranked = CandidateList(list(candidates.ranked())[:steps])
    return SearchPlan(steps=steps, iterations_per_candidate=per_candidate, ranked=ranked)


@dataclass
class AttackResult:
    status: str
    adversarial_image: object = None
    adversarial_text: object = None
    image_iterations_used: int = 0
    queries_used: int = 0
    candidate_index: int = None
    queries_by_stage: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    @property
    def success(self):
        return self.status != FAILURE

    @property
    def adversarial_pair(self):
        if not self.success:
            return None
        return self.adversarial_image, self.adversarial_text

    def to_dict(self, original_image=None):
        data = {
            'status': self.status,
            'image_iterations_used': self.image_iterations_used,
            'queries_used': self.queries_used,
            'candidate_index': self.candidate_index,
            'queries_by_stage': dict(sorted(self.queries_by_stage.items())),
            'trace': self.trace,
            'adversarial_text': None,
            'linf_distance': None,
        }
        if self.success:
            data['adversarial_text'] = self.adversarial_text.text
            data['adversarial_tokens'] = list(self.adversarial_text.tokens)
            if original_image is not None:
                reference = torch.as_tensor(original_image, dtype=self.adversarial_image.dtype)
                data['linf_distance'] = float((self.adversarial_image - reference).abs().max())
        return data


class AttackRun:
    """
    One attack instance: the clean pair, the handle onto S, the image
    iterations spent so far and the per-stage trace.
    """

    def __init__(self, model, handle, image, text, budget, seed=0):
        self.model = model
        self.handle = handle
        self.image = torch.as_tensor(image, dtype=model.dtype)
        self.text = text
        self.budget = budget
        self.seed = seed
        self.iterations = 0
        self.trace = []
        self._clean = None

    @property
    def clean(self):
        if self._clean is None:
            self._clean = clean_features(self.model, self.image, self.text)
        return self._clean

    @property
    def queries_used(self):
        return self.handle.queries_used

    def log(self, stage, **fields):
        event = {'stage': stage, 'iterations': self.iterations, 'queries': self.queries_used}
        event.update(fields)
        self.trace.append(event)

    def query(self, image, text, stage):
        """True when S's answer on the pair differs from the original one"""
        return self.handle.is_adversarial(self.handle.query(image, text, stage=stage))

    def finish(self, status, image=None, text=None, candidate_index=None):
        logger.info('Attack finished: %s after %s iterations, %s queries',
                    status, self.iterations, self.queries_used)
        by_stage = dict(self.handle.ledger.by_stage)
        return AttackResult(
            status=status,
            adversarial_image=image if status != FAILURE else None,
            adversarial_text=text if status != FAILURE else None,
            image_iterations_used=self.iterations,
            queries_used=self.queries_used,
            candidate_index=candidate_index,
            queries_by_stage=by_stage,
            trace=list(self.trace),
        )

    def image_stage(self, steps=None, terms=BOTH_TERMS):
        """Single-modal block-wise attack plus one query. Returns (image, flipped)."""
        steps = self.budget.init_steps if steps is None else steps
        losses = []
        adv_image = bsa_attack(self.model, self.image, self.text, steps, self.budget, self.seed,
                               terms=terms, loss_trace=losses)
        self.iterations += steps
        flipped = self.query(adv_image, self.text, STAGE_IMAGE)
        self.log(STAGE_IMAGE, terms=terms, flipped=flipped, final_loss=losses[-1] if losses else None)
        logger.info('Image stage: %s steps, flipped=%s', steps, flipped)
        return adv_image, flipped

    def text_stage(self, space, k):
        outcome = text_attack(self.handle, self.image, self.text, self.budget, space, k)
        self.log(
            STAGE_TEXT,
            flipped=outcome.success,
            candidates=len(outcome.candidates),
            rejected=outcome.rejected,
            probes=outcome.importance_queries,
            order=outcome.order,
        )
        logger.info('Text stage: %s candidates tested, flipped=%s', outcome.candidate_queries, outcome.success)
        return outcome


def icsa_run(model, handle, start_image, plan, image, text, budget, run=None):
    """
    Iterative cross-search over ``plan``, starting from the single-modal
    output ``start_image``. The clean (image, text) features stay the
    reference of every refinement. With an empty plan the remaining
    N - N_s iterations go to the image with the original text and S is
    queried once.
    """
    plan.validate(budget)
    run = run or AttackRun(model, handle, image, text, budget)
    adv_image = torch.as_tensor(start_image, dtype=model.dtype)

    if plan.steps == 0:
        steps = budget.multimodal_steps
        adv_image = bsa_iterate(model, run.image, adv_image, text, steps, budget, clean=run.clean)
        run.iterations += steps
        flipped = run.query(adv_image, text, STAGE_MULTIMODAL)
        run.log(STAGE_MULTIMODAL, candidate=None, refined=True, flipped=flipped)
        logger.info('No text candidates, %s further image steps, flipped=%s', steps, flipped)
        if flipped:
            return run.finish(SUCCESS_IMAGE, adv_image, text)
        return run.finish(FAILURE)

    for index, candidate in enumerate(plan.ranked):
        flipped = run.query(adv_image, candidate.text, STAGE_MULTIMODAL)
        run.log(STAGE_MULTIMODAL, candidate=index, refined=False, flipped=flipped, similarity=candidate.similarity)
        if flipped:
            return run.finish(SUCCESS_MULTIMODAL, adv_image, candidate.text, candidate_index=index)

        adv_image = bsa_iterate(
            model, run.image, adv_image, text, plan.iterations_per_candidate, budget,
            clean=run.clean, adv_text=candidate.text,
        )
        run.iterations += plan.iterations_per_candidate
        flipped = run.query(adv_image, candidate.text, STAGE_MULTIMODAL)
        run.log(STAGE_MULTIMODAL, candidate=index, refined=True, flipped=flipped, similarity=candidate.similarity)
        logger.info('Cross-search candidate %s/%s "%s": flipped=%s',
                    index + 1, plan.steps, candidate.text.text, flipped)
        if flipped:
            return run.finish(SUCCESS_MULTIMODAL, adv_image, candidate.text, candidate_index=index)
    return run.finish(FAILURE)


def vlattack(model, handle, image, text, budget, seed, space=None, k=None):
    """
    Full attack on one correctly predicted (image, text) pair: image stage,
    then text stage, then cross-search. Stops at the first stage that
    changes S's answer.
    """
    space = space or SubstitutionSpace.from_model(model)
    k = settings.VLATTACK['SUBSTITUTIONS_PER_WORD'] if k is None else k
    run = AttackRun(model, handle, image, text, budget, seed)

    adv_image, flipped = run.image_stage()
    if flipped:
        return run.finish(SUCCESS_IMAGE, adv_image, text)

    outcome = run.text_stage(space, k)
    if outcome.success:
        return run.finish(SUCCESS_TEXT, run.image, outcome.adversarial_text)

    plan = compute_plan(outcome.candidates, budget)
    logger.info('Cross-search plan: K=%s, N_k=%s over %s candidates',
                plan.steps, plan.iterations_per_candidate, len(outcome.candidates))
    return icsa_run(model, handle, adv_image, plan, run.image, text, budget, run=run)


def validate_trace(result, budget, image=None, text=None, cross_queries=None):
    """
    Re-check a finished attack against its budget and query accounting.
    Raises EvaluationError on the first broken invariant.
    """
    if result.status not in STATUSES:
        raise EvaluationError(f"Unknown status '{result.status}'")
    if result.image_iterations_used > budget.steps:
        raise EvaluationError(
            f'{result.image_iterations_used} image iterations exceed the budget of {budget.steps}'
        )
    by_stage = result.queries_by_stage
    counted = sum(count for stage, count in by_stage.items() if stage != STAGE_IMPORTANCE)
    if counted != result.queries_used:
        raise EvaluationError(f'Query ledger {by_stage} does not add up to {result.queries_used}')
    if by_stage.get(STAGE_IMAGE, 0) > 1:
        raise EvaluationError('More than one image-stage query')
    cross_queries = 2 * max(budget.multimodal_steps, 1) if cross_queries is None else cross_queries
    if by_stage.get(STAGE_MULTIMODAL, 0) > cross_queries:
        raise EvaluationError('More cross-search queries than the plan allows')
    if not result.success:
        if result.adversarial_pair is not None:
            raise EvaluationError('A failed attack carries an adversarial pair')
        return result
    if text is not None and result.status == SUCCESS_IMAGE and result.adversarial_text.tokens != text.tokens:
        raise EvaluationError('Image-stage success changed the text')
    if image is not None:
        reference = torch.as_tensor(image, dtype=result.adversarial_image.dtype)
        distance = float((result.adversarial_image - reference).abs().max())
        if result.status == SUCCESS_TEXT and distance != 0.0:
            raise EvaluationError('Text-stage success changed the image')
        if distance > budget.sigma_i + torch.finfo(reference.dtype).eps * 2:
            raise EvaluationError(f'Adversarial image is {distance} away, sigma_i is {budget.sigma_i}')
    return result
