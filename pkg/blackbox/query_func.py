# blackbox/query_func.py
"""
The only gateway to a fine-tuned task S

Attack code receives a QueryHandle: it can query predictions (with a
confidence score), ask whether a prediction counts as adversarial, and
nothing else. Every query is checked against the l-inf ball and the
sentence-similarity gate and counted in a QueryLedger.
"""

import logging
from collections import Counter
from typing import NamedTuple

import torch

from modelzoo.exceptions import ConstraintViolation, InputError
from modelzoo.tasks import CLASSIFICATION, GROUNDING, SEQUENCE_GENERATION, Prediction


logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5

STAGE_IMAGE = 'image'
STAGE_IMPORTANCE = 'importance'
STAGE_TEXT = 'text'
STAGE_MULTIMODAL = 'multimodal'


class BoundingBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self):
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def validate(self, image_size=None):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InputError(f'Box {tuple(self)} has x1 > x2 or y1 > y2')
        if image_size is not None and (min(self) < 0 or max(self) > image_size):
            raise InputError(f'Box {tuple(self)} leaves the {image_size}px image')
        return self


def iou(a, b):
    """Intersection over union of two (x1, y1, x2, y2) boxes; 0 for an empty union"""
    box_a = BoundingBox(*a).validate()
    box_b = BoundingBox(*b).validate()
    inter_w = max(0.0, min(box_a.x2, box_b.x2) - max(box_a.x1, box_b.x1))
    inter_h = max(0.0, min(box_a.y2, box_b.y2) - max(box_a.y1, box_b.y1))
    intersection = inter_w * inter_h
    union = box_a.area + box_b.area - intersection
    if union <= 0:
        return 0.0
    return intersection / union


def is_adversarial(prediction, original, task_kind):
    """Has the prediction moved away from the original one?"""
    if prediction.kind != task_kind or original.kind != task_kind:
        raise InputError(f'Prediction kinds {prediction.kind}/{original.kind} do not match {task_kind}')
    if task_kind == CLASSIFICATION:
        return prediction.label != original.label
    if task_kind == SEQUENCE_GENERATION:
        return tuple(prediction.tokens) != tuple(original.tokens)
    if task_kind == GROUNDING:
        return iou(prediction.box, original.box) <= IOU_THRESHOLD
    raise InputError(f"Unknown task kind '{task_kind}'")


class QueryLedger:
    """
    Per-attack query counter. Also holds the clean pair and the budget the
    queried pairs are checked against.
    """

    def __init__(self, original_image, original_text, sigma_i, sigma_s, max_modified_words, sentence_encoder):
        self.original_image = torch.as_tensor(original_image).detach().clone()
        self.original_text = original_text
        self.sigma_i = sigma_i
        self.sigma_s = sigma_s
        self.max_modified_words = max_modified_words
        self.sentence_encoder = sentence_encoder
        self.count = 0
        self.by_stage = Counter()
        self.constraint_violations = 0

    def record(self, stage):
        self.count += 1
        self.by_stage[stage] += 1

    @property
    def attack_queries(self):
        """Queries excluding word-importance probes"""
        return self.count - self.by_stage[STAGE_IMPORTANCE]

    def _violation(self, message, **diagnostics):
        self.constraint_violations += 1
        logger.error('Constraint violation: %s %s', message, diagnostics)
        raise ConstraintViolation(message, diagnostics)

    def check_image(self, image):
        image = torch.as_tensor(image)
        if tuple(image.shape) != tuple(self.original_image.shape):
            self._violation('Image shape changed', shape=tuple(image.shape))
        reference = self.original_image.to(image.dtype)
        tolerance = torch.finfo(image.dtype).eps * 2
        distance = float((image - reference).abs().max())
        if distance > self.sigma_i + tolerance:
            self._violation('Image left the l-inf ball', distance=distance, sigma_i=self.sigma_i)
        if float(image.min()) < 0.0 or float(image.max()) > 1.0:
            self._violation('Image left [0, 1]', low=float(image.min()), high=float(image.max()))

    def check_text(self, text, gate=True):
        if text.tokens == self.original_text.tokens:
            return
        changed = self.original_text.differing_positions(text)
        if len(changed) > self.max_modified_words:
            self._violation('Too many modified words', positions=changed)
        if gate:
            similarity = self.sentence_encoder.similarity(self.original_text, text)
            if not similarity > self.sigma_s:
                self._violation('Text failed the similarity gate', similarity=similarity, sigma_s=self.sigma_s)

    def to_dict(self):
        return {
            'count': self.count,
            'by_stage': dict(sorted(self.by_stage.items())),
            'constraint_violations': self.constraint_violations,
        }


def query(task, image, text, ledger, stage=STAGE_IMAGE, gate=True):
    """
    One black-box query of S. Checks the pair against the ledger's
    constraints first; a violation is a bug in the attack and raises.
    """
    ledger.check_image(image)
    ledger.check_text(text, gate=gate)
    ledger.record(stage)
    image = torch.as_tensor(image)
    return task.predict(image.unsqueeze(0) if image.dim() == 3 else image, [text])[0]


class QueryHandle:
    """
    What the attack sees of S. The clean prediction is recorded once at
    construction and does not count as a query. ``hard_label`` hides the
    scores (every confidence becomes 1.0).
    """

    def __init__(self, task, ledger, hard_label=False):
        self._task = task
        self.ledger = ledger
        self.hard_label = hard_label
        self.task_kind = task.task_kind
        self.original_prediction = self._expose(
            task.predict(ledger.original_image.unsqueeze(0), [ledger.original_text])[0]
        )

    def _expose(self, prediction):
        if not self.hard_label:
            return prediction
        return Prediction(kind=prediction.kind, confidence=1.0, label=prediction.label,
                          tokens=prediction.tokens, box=prediction.box)

    @property
    def queries_used(self):
        return self.ledger.attack_queries

    def query(self, image, text, stage=STAGE_IMAGE):
        return self._expose(query(self._task, image, text, self.ledger, stage=stage))

    def probe(self, image, text):
        """Word-importance probe: masked texts are exempt from the similarity gate"""
        return self._expose(query(self._task, image, text, self.ledger, stage=STAGE_IMPORTANCE, gate=False))

    def is_adversarial(self, prediction):
        return is_adversarial(prediction, self.original_prediction, self.task_kind)


def open_handle(task, image, text, budget, sentence_encoder, hard_label=False):
    """Fresh ledger + handle for one attack instance"""
    ledger = QueryLedger(
        original_image=image,
        original_text=text,
        sigma_i=budget.sigma_i,
        sigma_s=budget.sigma_s,
        max_modified_words=budget.max_modified_words,
        sentence_encoder=sentence_encoder,
    )
    return QueryHandle(task, ledger, hard_label=hard_label)
