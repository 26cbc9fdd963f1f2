import random

import torch
from django.test import SimpleTestCase, tag

from blackbox.query_func import STAGE_IMAGE, STAGE_MULTIMODAL, STAGE_TEXT, open_handle
from bsa.attack_func import bsa_iterate, clean_features, init_perturbation
from bsa.budget import AttackBudget
from modelzoo.exceptions import ConfigurationError, EvaluationError
from modelzoo.testing import ScriptedTask, constant_task, image_trigger_task, random_image, tiny_model
from modelzoo.vocab import Vocabulary
from text_attack.substitution_func import CandidateList, SubstitutionSpace, TextCandidate, text_attack
from .search_func import (
    FAILURE, SUCCESS_IMAGE, SUCCESS_MULTIMODAL, SUCCESS_TEXT, AttackRun, SearchPlan, compute_plan,
    icsa_run, validate_trace, vlattack,
)


def dummy_candidates(count, seed=0):
    vocab = Vocabulary(8)
    text = vocab.encode('what color is the circle')
    rng = random.Random(seed)
    return CandidateList(
        TextCandidate(text, rng.uniform(0.9, 1.0), i % 3, text.tokens[0], 5 + i) for i in range(count)
    )


class PlanTests(SimpleTestCase):

    def test_reference_cases(self):
        budget = AttackBudget(steps=40, init_steps=20)
        for count, steps, per_candidate in ((50, 20, 1), (10, 10, 2), (0, 0, 0), (3, 3, 6), (7, 7, 2)):
            with self.subTest(count=count):
                plan = compute_plan(dummy_candidates(count), budget)
                self.assertEqual((plan.steps, plan.iterations_per_candidate), (steps, per_candidate))

    def test_randomised_allocation(self):
        rng = random.Random(0)
        for case in range(500):
            steps = rng.randint(1, 100)
            init_steps = rng.randint(1, steps)
            count = rng.randint(0, 60)
            budget = AttackBudget(steps=steps, init_steps=init_steps)
            remaining = steps - init_steps
            expected_k = count if count < remaining else remaining
            expected_nk = 0 if expected_k == 0 else int(remaining / expected_k)

            candidates = dummy_candidates(count, seed=case)
            plan = compute_plan(candidates, budget)
            with self.subTest(case=case, steps=steps, init_steps=init_steps, count=count):
                self.assertEqual(plan.steps, expected_k)
                self.assertEqual(plan.iterations_per_candidate, expected_nk)
                self.assertLessEqual(plan.steps * plan.iterations_per_candidate, remaining)
                self.assertEqual(list(plan.ranked), list(candidates.ranked())[:expected_k])
                plan.validate(budget)

    def test_invalid_plans(self):
        budget = AttackBudget(steps=40, init_steps=20)
        for plan in (
            SearchPlan(steps=2, iterations_per_candidate=1, ranked=dummy_candidates(1)),
            SearchPlan(steps=1, iterations_per_candidate=21, ranked=dummy_candidates(1)),
            SearchPlan(steps=0, iterations_per_candidate=3, ranked=CandidateList()),
        ):
            with self.subTest(plan=plan):
                with self.assertRaises(ConfigurationError):
                    plan.validate(budget)


class AttackTestCase(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.space = SubstitutionSpace.from_model(self.model)
        self.vocab = self.model.vocab
        self.image = random_image(seed=1)
        self.text = self.vocab.encode('what color is the circle')
        self.budget = AttackBudget(sigma_s=0.1)

    def handle(self, task, budget=None):
        return open_handle(task, self.image, self.text, budget or self.budget, self.space.encoder)

    def text_changed_task(self, needs_moved_image=False):
        """Flips on any substituted text, optionally only together with a moved image"""
        reference, original = self.image, self.text.tokens

        def decide(image, text):
            moved = bool((image - reference).abs().max() > 0)
            changed = text.tokens != original and self.vocab.unk_id not in text.tokens
            return (1, 0.6) if changed and (moved or not needs_moved_image) else (0, 0.9)

        return ScriptedTask(decide)

    def attack(self, task, k=8):
        handle = self.handle(task)
        result = vlattack(self.model, handle, self.image, self.text, self.budget, seed=0, space=self.space, k=k)
        return handle, result


class EmptyPlanTests(AttackTestCase):

    def test_spends_remaining_iterations_with_one_query(self):
        handle = self.handle(constant_task())
        plan = compute_plan(CandidateList(), self.budget)
        result = icsa_run(self.model, handle, self.image, plan, self.image, self.text, self.budget)
        self.assertEqual(result.status, FAILURE)
        self.assertEqual(result.image_iterations_used, 20)
        self.assertEqual(result.queries_used, 1)
        self.assertEqual(handle.ledger.by_stage[STAGE_MULTIMODAL], 1)
        self.assertIsNone(result.adversarial_pair)

    def test_success_keeps_original_text(self):
        start = init_perturbation(self.image, self.budget.sigma_i, seed=0)
        handle = self.handle(image_trigger_task(self.image, threshold=1e-9))
        plan = compute_plan(CandidateList(), self.budget)
        result = icsa_run(self.model, handle, start, plan, self.image, self.text, self.budget)
        self.assertEqual(result.status, SUCCESS_IMAGE)
        self.assertEqual(result.adversarial_text, self.text)
        validate_trace(result, self.budget, image=self.image, text=self.text)


class VLAttackTests(AttackTestCase):

    def test_image_stage_success(self):
        _, result = self.attack(image_trigger_task(self.image, threshold=1e-9))
        self.assertEqual(result.status, SUCCESS_IMAGE)
        self.assertEqual(result.queries_used, 1)
        self.assertEqual(result.image_iterations_used, self.budget.init_steps)
        self.assertEqual(result.adversarial_text.tokens, self.text.tokens)
        validate_trace(result, self.budget, image=self.image, text=self.text)

    def test_text_stage_success_keeps_clean_image(self):
        _, result = self.attack(self.text_changed_task())
        self.assertEqual(result.status, SUCCESS_TEXT)
        self.assertTrue(torch.equal(result.adversarial_image, self.image))
        self.assertEqual(result.queries_by_stage[STAGE_IMAGE], 1)
        self.assertEqual(result.queries_by_stage[STAGE_TEXT], 1)
        self.assertEqual(len(self.text.differing_positions(result.adversarial_text)), 1)
        validate_trace(result, self.budget, image=self.image, text=self.text)

    def test_first_candidate_flips_before_refinement(self):
        _, result = self.attack(self.text_changed_task(needs_moved_image=True))
        self.assertEqual(result.status, SUCCESS_MULTIMODAL)
        self.assertEqual(result.candidate_index, 0)
        self.assertEqual(result.queries_by_stage[STAGE_MULTIMODAL], 1)
        self.assertEqual(result.image_iterations_used, self.budget.init_steps)
        validate_trace(result, self.budget, image=self.image, text=self.text)

    def test_exhausted_attack_spends_the_whole_budget(self):
        handle, result = self.attack(constant_task())
        self.assertEqual(result.status, FAILURE)
        candidates = result.queries_by_stage[STAGE_TEXT]
        self.assertGreaterEqual(candidates, 20)
        plan_steps = min(candidates, self.budget.multimodal_steps)
        per_candidate = self.budget.multimodal_steps // plan_steps
        self.assertEqual(result.image_iterations_used, self.budget.init_steps + plan_steps * per_candidate)
        self.assertEqual(result.image_iterations_used, 40)
        self.assertEqual(result.queries_used, 1 + candidates + 2 * plan_steps)
        self.assertEqual(handle.queries_used, result.queries_used)
        validate_trace(result, self.budget, image=self.image, text=self.text)

    def test_impossible_gate_falls_back_to_image_only(self):
        budget = AttackBudget(sigma_s=1.0 + 1e-9)
        handle = self.handle(constant_task(), budget)
        result = vlattack(self.model, handle, self.image, self.text, budget, seed=0, space=self.space, k=8)
        self.assertEqual(result.status, FAILURE)
        self.assertEqual(result.image_iterations_used, 40)
        self.assertEqual(result.queries_used, 2)
        self.assertEqual(result.queries_by_stage.get(STAGE_TEXT, 0), 0)

    def test_same_seed_same_result(self):
        _, first = self.attack(self.text_changed_task(needs_moved_image=True))
        _, second = self.attack(self.text_changed_task(needs_moved_image=True))
        self.assertTrue(torch.equal(first.adversarial_image, second.adversarial_image))
        self.assertEqual(first.adversarial_text, second.adversarial_text)

    def test_result_serialisation(self):
        _, result = self.attack(image_trigger_task(self.image, threshold=1e-9))
        data = result.to_dict(self.image)
        self.assertEqual(data['status'], SUCCESS_IMAGE)
        self.assertLessEqual(data['linf_distance'], self.budget.sigma_i + 1e-12)
        self.assertEqual(data['adversarial_tokens'], list(self.text.tokens))


class RefinementTests(AttackTestCase):
    """A candidate that only works once the image has been refined for it"""

    def two_candidate_plan(self):
        handle = self.handle(constant_task())
        outcome = text_attack(handle, self.image, self.text, self.budget, self.space, 8)
        ranked = list(outcome.candidates.ranked())[:2]
        self.assertEqual(len(ranked), 2)
        return compute_plan(CandidateList(ranked), self.budget)

    def test_flip_after_refinement_of_second_candidate(self):
        plan = self.two_candidate_plan()
        first, second = plan.ranked
        queried = []

        def decide(image, text):
            queried.append((image.clone(), text.tokens))
            seen = sum(1 for _, tokens in queried if tokens == second.text.tokens)
            return (1, 0.6) if text.tokens == second.text.tokens and seen == 2 else (0, 0.9)

        handle = self.handle(ScriptedTask(decide))
        queried.clear()
        start = init_perturbation(self.image, self.budget.sigma_i, seed=0)
        result = icsa_run(self.model, handle, start, plan, self.image, self.text, self.budget)

        self.assertEqual(result.status, SUCCESS_MULTIMODAL)
        self.assertEqual(result.candidate_index, 1)
        self.assertEqual(result.adversarial_text, second.text)
        self.assertEqual(plan.iterations_per_candidate, 10)
        self.assertEqual(result.image_iterations_used, 20)
        self.assertEqual(result.queries_used, 4)
        self.assertEqual(result.queries_by_stage[STAGE_MULTIMODAL], 4)
        self.assertEqual(
            [(e['candidate'], e['refined'], e['flipped']) for e in result.trace],
            [(0, False, False), (0, True, False), (1, False, False), (1, True, True)],
        )
        self.assertEqual(
            [tokens for _, tokens in queried],
            [first.text.tokens, first.text.tokens, second.text.tokens, second.text.tokens],
        )

        images = [image for image, _ in queried]
        self.assertTrue(torch.equal(images[0], start))
        self.assertFalse(torch.equal(images[1], start))
        # the second candidate starts from the first candidate's refined image
        self.assertTrue(torch.equal(images[2], images[1]))
        self.assertFalse(torch.equal(images[3], images[2]))
        self.assertTrue(torch.equal(result.adversarial_image, images[3]))

        clean = clean_features(self.model, self.image, self.text)
        carried = bsa_iterate(self.model, self.image, start, self.text, 10, self.budget,
                              clean=clean, adv_text=first.text)
        self.assertTrue(torch.equal(images[1], carried))
        validate_trace(result, self.budget, image=self.image, text=self.text)

    def test_refined_failure_spends_both_queries_per_candidate(self):
        plan = self.two_candidate_plan()
        handle = self.handle(constant_task())
        start = init_perturbation(self.image, self.budget.sigma_i, seed=0)
        result = icsa_run(self.model, handle, start, plan, self.image, self.text, self.budget)
        self.assertEqual(result.status, FAILURE)
        self.assertEqual(result.queries_by_stage[STAGE_MULTIMODAL], 4)
        self.assertEqual(result.image_iterations_used, 20)
        self.assertEqual([e['refined'] for e in result.trace], [False, True, False, True])


class TraceValidationTests(AttackTestCase):

    def test_flags_broken_results(self):
        _, result = self.attack(image_trigger_task(self.image, threshold=1e-9))
        for changes in (
            {'status': 'bogus'},
            {'image_iterations_used': 41},
            {'queries_used': 5},
            {'queries_by_stage': {STAGE_IMAGE: 2}, 'queries_used': 2},
        ):
            broken = type(result)(**{**result.__dict__, **changes})
            with self.subTest(changes=changes):
                with self.assertRaises(EvaluationError):
                    validate_trace(broken, self.budget)

    def test_image_success_must_keep_text(self):
        _, result = self.attack(image_trigger_task(self.image, threshold=1e-9))
        result.adversarial_text = self.text.replace(4, self.vocab.stoi['square'], self.vocab)
        with self.assertRaises(EvaluationError):
            validate_trace(result, self.budget, text=self.text)

    def test_out_of_ball_image(self):
        _, result = self.attack(image_trigger_task(self.image, threshold=1e-9))
        result.adversarial_image = (self.image + 0.5).clamp(0, 1)
        with self.assertRaises(EvaluationError):
            validate_trace(result, self.budget, image=self.image)


class AttackRunTests(AttackTestCase):

    def test_trace_records_each_stage(self):
        handle = self.handle(constant_task())
        run = AttackRun(self.model, handle, self.image, self.text, self.budget, seed=0)
        _, flipped = run.image_stage(steps=3)
        self.assertFalse(flipped)
        run.text_stage(self.space, 2)
        self.assertEqual([event['stage'] for event in run.trace], [STAGE_IMAGE, STAGE_TEXT])
        self.assertEqual(run.iterations, 3)


@tag('slow')
class ConstraintSuiteTests(AttackTestCase):
    """Full attacks against a never-flipping task exercise every query path"""

    def test_fifty_seeded_attacks_stay_feasible(self):
        for seed in range(50):
            image = random_image(seed=seed)
            handle = open_handle(constant_task(), image, self.text, self.budget, self.space.encoder)
            result = vlattack(self.model, handle, image, self.text, self.budget, seed=seed, space=self.space, k=8)
            with self.subTest(seed=seed):
                self.assertEqual(handle.ledger.constraint_violations, 0)
                self.assertEqual(result.status, FAILURE)
                validate_trace(result, self.budget, image=image, text=self.text)
