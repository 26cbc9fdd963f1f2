import inspect

import numpy as np
import torch
from django.test import SimpleTestCase

from bsa import attack_func
from bsa.budget import AttackBudget
from icsa import search_func
from modelzoo.exceptions import ConstraintViolation, InputError
from modelzoo.networks import SentenceEncoder
from modelzoo.tasks import CLASSIFICATION, GROUNDING, SEQUENCE_GENERATION, Prediction
from modelzoo.testing import constant_task, random_image, tiny_model
from text_attack import substitution_func
from .query_func import (
    STAGE_IMAGE, STAGE_IMPORTANCE, STAGE_TEXT, BoundingBox, iou, is_adversarial, open_handle,
)


def grid_iou(a, b, size=16):
    """Count unit pixels covered by each box"""
    mask_a = np.zeros((size, size), dtype=bool)
    mask_b = np.zeros((size, size), dtype=bool)
    mask_a[a[1]:a[3], a[0]:a[2]] = True
    mask_b[b[1]:b[3], b[0]:b[2]] = True
    union = (mask_a | mask_b).sum()
    return (mask_a & mask_b).sum() / union if union else 0.0


class IoUTests(SimpleTestCase):

    def test_identical_and_disjoint(self):
        self.assertEqual(iou((1, 1, 5, 5), (1, 1, 5, 5)), 1.0)
        self.assertEqual(iou((0, 0, 2, 2), (3, 3, 5, 5)), 0.0)

    def test_diagonal_overlap(self):
        self.assertAlmostEqual(iou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7)

    def test_zero_area_union(self):
        self.assertEqual(iou((2, 2, 2, 2), (2, 2, 2, 2)), 0.0)

    def test_matches_pixel_grid_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            boxes = []
            for _ in range(2):
                x = sorted(rng.integers(0, 17, size=2))
                y = sorted(rng.integers(0, 17, size=2))
                boxes.append((int(x[0]), int(y[0]), int(x[1]), int(y[1])))
            a, b = boxes
            self.assertAlmostEqual(iou(a, b), grid_iou(a, b), delta=1e-6)
            self.assertEqual(iou(a, b), iou(b, a))
            self.assertTrue(0.0 <= iou(a, b) <= 1.0)

    def test_malformed_box(self):
        with self.assertRaises(InputError):
            iou((3, 0, 1, 2), (0, 0, 1, 1))
        with self.assertRaises(InputError):
            BoundingBox(0, 0, 40, 4).validate(image_size=32)


class AdversarialPredicateTests(SimpleTestCase):

    def test_irreflexive(self):
        for prediction in (
            Prediction(kind=CLASSIFICATION, confidence=0.7, label=3),
            Prediction(kind=SEQUENCE_GENERATION, confidence=0.7, tokens=(6, 7)),
            Prediction(kind=GROUNDING, confidence=0.7, box=(1, 1, 6, 6)),
        ):
            self.assertFalse(is_adversarial(prediction, prediction, prediction.kind))

    def test_classification(self):
        a = Prediction(kind=CLASSIFICATION, confidence=0.9, label=1)
        b = Prediction(kind=CLASSIFICATION, confidence=0.2, label=2)
        self.assertTrue(is_adversarial(b, a, CLASSIFICATION))

    def test_generation_compares_whole_sequence(self):
        a = Prediction(kind=SEQUENCE_GENERATION, confidence=0.9, tokens=(6, 7))
        longer = Prediction(kind=SEQUENCE_GENERATION, confidence=0.9, tokens=(6, 7, 8))
        swapped = Prediction(kind=SEQUENCE_GENERATION, confidence=0.9, tokens=(7, 6))
        self.assertTrue(is_adversarial(longer, a, SEQUENCE_GENERATION))
        self.assertTrue(is_adversarial(swapped, a, SEQUENCE_GENERATION))

    def test_grounding_threshold(self):
        original = Prediction(kind=GROUNDING, confidence=0.9, box=(0, 0, 2, 2))
        shifted = Prediction(kind=GROUNDING, confidence=0.9, box=(1, 1, 3, 3))
        close = Prediction(kind=GROUNDING, confidence=0.9, box=(0, 0, 2, 3))
        self.assertTrue(is_adversarial(shifted, original, GROUNDING))
        self.assertFalse(is_adversarial(close, original, GROUNDING))

    def test_kind_mismatch(self):
        a = Prediction(kind=CLASSIFICATION, confidence=0.9, label=1)
        b = Prediction(kind=GROUNDING, confidence=0.9, box=(0, 0, 1, 1))
        with self.assertRaises(InputError):
            is_adversarial(a, b, CLASSIFICATION)


class QueryLedgerTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.encoder = SentenceEncoder.from_model(self.model)
        self.vocab = self.model.vocab
        self.image = random_image()
        self.text = self.vocab.encode('what color is the circle')
        self.budget = AttackBudget()
        self.task = constant_task()
        self.handle = open_handle(self.task, self.image, self.text, self.budget, self.encoder)

    def test_original_prediction_is_free(self):
        self.assertEqual(self.handle.queries_used, 0)
        self.assertEqual(self.task.calls, 1)
        self.assertEqual(self.handle.original_prediction.label, 0)

    def test_counts_every_query(self):
        for _ in range(5):
            prediction = self.handle.query(self.image, self.text)
            self.assertEqual(prediction, self.handle.original_prediction)
        self.assertEqual(self.handle.ledger.count, 5)
        self.assertEqual(self.handle.ledger.by_stage[STAGE_IMAGE], 5)

    def test_out_of_ball_image(self):
        far = (self.image + 2 * self.budget.sigma_i).clamp(0, 1)
        with self.assertRaises(ConstraintViolation):
            self.handle.query(far, self.text)
        self.assertEqual(self.handle.ledger.constraint_violations, 1)
        self.assertEqual(self.handle.ledger.count, 0)

    def test_pixel_range(self):
        image = torch.zeros(8, 8, 3, dtype=torch.float64)
        handle = open_handle(self.task, image, self.text, self.budget, self.encoder)
        with self.assertRaises(ConstraintViolation):
            handle.query(image - 0.01, self.text)

    def test_two_modified_words(self):
        two = self.text.replace(0, self.vocab.stoi['which'], self.vocab).replace(1, self.vocab.stoi['hue'], self.vocab)
        with self.assertRaises(ConstraintViolation):
            self.handle.query(self.image, two, stage=STAGE_TEXT)

    def test_similarity_gate(self):
        handle = open_handle(self.task, self.image, self.text, self.budget.with_changes(sigma_s=1.5), self.encoder)
        changed = self.text.replace(4, self.vocab.stoi['square'], self.vocab)
        with self.assertRaises(ConstraintViolation):
            handle.query(self.image, changed, stage=STAGE_TEXT)

    def test_importance_probes_skip_gate_and_attack_count(self):
        handle = open_handle(self.task, self.image, self.text, self.budget.with_changes(sigma_s=1.5), self.encoder)
        masked = self.text.replace(4, self.vocab.unk_id, self.vocab)
        handle.probe(self.image, masked)
        self.assertEqual(handle.ledger.by_stage[STAGE_IMPORTANCE], 1)
        self.assertEqual(handle.ledger.count, 1)
        self.assertEqual(handle.queries_used, 0)

    def test_hard_label_hides_scores(self):
        handle = open_handle(self.task, self.image, self.text, self.budget, self.encoder, hard_label=True)
        self.assertEqual(handle.original_prediction.confidence, 1.0)
        self.assertEqual(handle.query(self.image, self.text).confidence, 1.0)


class InterfaceAuditTests(SimpleTestCase):
    """Attack code may only reach the fine-tuned task through the query handle"""

    def test_attack_modules_do_not_touch_task_internals(self):
        for module in (attack_func, substitution_func, search_func):
            source = inspect.getsource(module)
            with self.subTest(module=module.__name__):
                self.assertNotIn('FineTunedTask', source)
                self.assertNotIn('._model', source)
                self.assertNotIn('._task', source)
