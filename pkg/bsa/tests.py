import numpy as np
import torch
from django.test import SimpleTestCase, override_settings
from django.conf import settings

from modelzoo.exceptions import AttackError, ConfigurationError, InputError
from modelzoo.networks import forward_with_features
from modelzoo.tasks import CLASSIFICATION, GROUNDING
from modelzoo.testing import random_image, tiny_model
from .attack_func import (
    FUSION_TERMS, IMAGE_TERMS, bsa_attack, bsa_iterate, bsa_loss, bsa_step, bsa_step_momentum,
    clean_features, cosine, init_perturbation, loss_and_gradient, project,
)
from .budget import AttackBudget


def ulp_tolerance(tensor):
    return torch.finfo(tensor.dtype).eps * 2


class BudgetTests(SimpleTestCase):

    def test_defaults(self):
        budget = AttackBudget()
        self.assertAlmostEqual(budget.sigma_i, 16 / 255)
        self.assertEqual(budget.multimodal_steps, 20)

    def test_invalid_budgets(self):
        for changes in (
            {'init_steps': 0},
            {'init_steps': 41},
            {'sigma_i': 1.0},
            {'sigma_i': -0.1},
            {'sigma_s': 0.0},
            {'step_size': -0.01},
            {'optimizer': 'adam'},
            {'max_modified_words': 0},
        ):
            with self.subTest(changes=changes):
                with self.assertRaises(ConfigurationError):
                    AttackBudget(**changes)

    def test_impossible_gate_and_zero_radius_allowed(self):
        budget = AttackBudget(sigma_s=1.0 + 1e-9, sigma_i=0.0, step_size=0.0)
        self.assertGreater(budget.sigma_s, 1.0)

    def test_grounding_uses_smaller_radius(self):
        self.assertAlmostEqual(
            AttackBudget.from_settings(task_kind=GROUNDING).sigma_i,
            settings.VLATTACK['SIGMA_I_GROUNDING'],
        )
        self.assertAlmostEqual(AttackBudget.from_settings(task_kind=CLASSIFICATION).sigma_i, 16 / 255)

    def test_explicit_overrides_win(self):
        budget = AttackBudget.from_settings(task_kind=GROUNDING, sigma_i=0.1, steps=10, init_steps=5)
        self.assertEqual((budget.sigma_i, budget.steps, budget.init_steps), (0.1, 10, 5))

    @override_settings(VLATTACK={**settings.VLATTACK, 'STEPS': 60})
    def test_settings_defaults(self):
        self.assertEqual(AttackBudget.from_settings().steps, 60)


class LossTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.text = self.model.vocab.encode('what color is the circle')
        self.image = random_image()

    def test_zero_norm_cosine_is_zero(self):
        u = torch.zeros(3, 4, dtype=torch.float64)
        v = torch.ones(3, 4, dtype=torch.float64)
        self.assertEqual(cosine(u, v).tolist(), [0.0, 0.0, 0.0])

    def test_identical_features_score_vector_count(self):
        features = clean_features(self.model, self.image, self.text)
        self.assertAlmostEqual(float(bsa_loss(features, features)), features.vector_count, places=9)
        self.assertAlmostEqual(float(bsa_loss(features, features, terms=IMAGE_TERMS)), 8.0, places=9)
        self.assertAlmostEqual(float(bsa_loss(features, features, terms=FUSION_TERMS)), 8.0, places=9)

    def test_shape_mismatch(self):
        features = clean_features(self.model, self.image, self.text)
        truncated = type(features)(image_blocks=features.image_blocks[:1], fusion_blocks=features.fusion_blocks)
        with self.assertRaises(InputError):
            bsa_loss(features, truncated)

    def test_unknown_terms(self):
        features = clean_features(self.model, self.image, self.text)
        with self.assertRaises(InputError):
            bsa_loss(features, features, terms='decoder')

    def test_gradient_matches_central_differences(self):
        clean = clean_features(self.model, self.image, self.text)
        point = init_perturbation(self.image, 16 / 255, seed=1)
        _, gradient = loss_and_gradient(self.model, clean, point, self.text)

        def loss_at(image):
            leaf = image.clone().requires_grad_(True)
            return float(bsa_loss(clean, forward_with_features(self.model, leaf, self.text)))

        rng = np.random.default_rng(0)
        h = 1e-3
        for flat in rng.choice(point.numel(), size=20, replace=False):
            index = np.unravel_index(flat, point.shape)
            up, down = point.clone(), point.clone()
            up[index] += h
            down[index] -= h
            numeric = (loss_at(up) - loss_at(down)) / (2 * h)
            analytic = float(gradient[index])
            relative = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            self.assertLess(relative, 1e-4, f'pixel {index}: {analytic} vs {numeric}')

    def test_non_finite_gradient_raises(self):
        clean = clean_features(self.model, self.image, self.text)
        with torch.no_grad():
            self.model.image_encoder.position.fill_(float('nan'))
        with self.assertRaises(AttackError) as raised:
            loss_and_gradient(self.model, clean, self.image, self.text)
        self.assertIn('non_finite', raised.exception.diagnostics)


class IterationTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.text = self.model.vocab.encode('what color is the circle')
        self.budget = AttackBudget(steps=8, init_steps=4)

    def assert_feasible(self, adv, image, sigma_i):
        self.assertLessEqual(float((adv - image).abs().max()), sigma_i + ulp_tolerance(adv))
        self.assertGreaterEqual(float(adv.min()), 0.0)
        self.assertLessEqual(float(adv.max()), 1.0)

    def test_init_perturbation(self):
        image = random_image()
        a = init_perturbation(image, 0.05, seed=7)
        b = init_perturbation(image, 0.05, seed=7)
        self.assertTrue(torch.equal(a, b))
        self.assert_feasible(a, image, 0.05)
        self.assertTrue(torch.equal(init_perturbation(image, 0.0, seed=7), image))

    def test_iterates_stay_feasible_near_pixel_bounds(self):
        image = torch.zeros(8, 8, 3, dtype=torch.float64)
        image[:4] = 1.0
        adv = image
        for _ in range(5):
            adv = bsa_step(self.model, image, adv, self.text, self.budget)
            self.assert_feasible(adv, image, self.budget.sigma_i)

    def test_attack_lowers_the_loss(self):
        image = random_image(seed=2)
        trace = []
        adv = bsa_attack(self.model, image, self.text, 20, self.budget, seed=0, loss_trace=trace)
        self.assertEqual(len(trace), 20)
        clean = clean_features(self.model, image, self.text)
        final = float(bsa_loss(clean, clean_features(self.model, adv, self.text)))
        self.assertLess(final, trace[0])
        self.assert_feasible(adv, image, self.budget.sigma_i)

    def test_zero_step_size_keeps_the_start(self):
        image = random_image()
        budget = self.budget.with_changes(step_size=0.0)
        start = init_perturbation(image, budget.sigma_i, seed=3)
        adv = bsa_iterate(self.model, image, start, self.text, 3, budget)
        self.assertTrue(torch.equal(adv, start))

    def test_seeded_attack_is_deterministic(self):
        image = random_image()
        a = bsa_attack(self.model, image, self.text, 3, self.budget, seed=11)
        b = bsa_attack(self.model, image, self.text, 3, self.budget, seed=11)
        self.assertTrue(torch.equal(a, b))

    def test_momentum_state_is_l1_normalised(self):
        image = random_image()
        start = init_perturbation(image, self.budget.sigma_i, seed=0)
        adv, state = bsa_step_momentum(self.model, image, start, self.text, self.budget, None, 1.0)
        self.assertAlmostEqual(float(state.abs().sum()), 1.0, places=9)
        _, state = bsa_step_momentum(self.model, image, adv, self.text, self.budget, state, 0.5)
        self.assertLessEqual(float(state.abs().sum()), 1.5 + 1e-9)
        self.assert_feasible(adv, image, self.budget.sigma_i)

    def test_zero_decay_reduces_to_plain_step(self):
        image = random_image(seed=5)
        start = init_perturbation(image, self.budget.sigma_i, seed=2)
        adv, state = bsa_step_momentum(self.model, image, start, self.text, self.budget, None, 1.0)
        momentum, _ = bsa_step_momentum(self.model, image, adv, self.text, self.budget, state, 0.0)
        plain = bsa_step(self.model, image, adv, self.text, self.budget)
        self.assertTrue(torch.equal(momentum, plain))

    def test_two_step_momentum_recurrence(self):
        image = random_image(seed=6)
        decay = 0.7
        clean = clean_features(self.model, image, self.text)
        start = init_perturbation(image, self.budget.sigma_i, seed=4)

        _, first_gradient = loss_and_gradient(self.model, clean, start, self.text)
        expected_state = first_gradient / first_gradient.abs().sum()
        adv, state = bsa_step_momentum(self.model, image, start, self.text, self.budget, None, decay)
        self.assertTrue(torch.allclose(state, expected_state, rtol=0, atol=1e-15))
        expected_adv = project(start - self.budget.step_size * expected_state.sign(), image, self.budget.sigma_i)
        self.assertTrue(torch.equal(adv, expected_adv))

        _, second_gradient = loss_and_gradient(self.model, clean, adv, self.text)
        expected_state = decay * expected_state + second_gradient / second_gradient.abs().sum()
        second, state = bsa_step_momentum(self.model, image, adv, self.text, self.budget, state, decay)
        self.assertTrue(torch.allclose(state, expected_state, rtol=0, atol=1e-15))
        expected_adv = project(adv - self.budget.step_size * expected_state.sign(), image, self.budget.sigma_i)
        self.assertTrue(torch.equal(second, expected_adv))

    def test_single_steps_mostly_descend(self):
        descended = 0
        for trial in range(100):
            image = random_image(seed=100 + trial)
            clean = clean_features(self.model, image, self.text)
            start = init_perturbation(image, self.budget.sigma_i, seed=trial)
            before, _ = loss_and_gradient(self.model, clean, start, self.text)
            adv = bsa_step(self.model, image, start, self.text, self.budget, clean=clean)
            after, _ = loss_and_gradient(self.model, clean, adv, self.text)
            descended += after <= before
        self.assertGreaterEqual(descended, 90)

    def test_zero_steps_return_the_start(self):
        image = random_image(seed=7)
        start = init_perturbation(image, self.budget.sigma_i, seed=5)
        self.assertTrue(torch.equal(bsa_attack(self.model, image, self.text, 0, self.budget, seed=5), start))
        self.assertTrue(torch.equal(bsa_iterate(self.model, image, start, self.text, 0, self.budget), start))

    def test_zero_radius_attack_keeps_the_image(self):
        image = random_image(seed=8)
        for optimizer in ('pgd', 'mi'):
            budget = self.budget.with_changes(sigma_i=0.0, optimizer=optimizer)
            with self.subTest(optimizer=optimizer):
                adv = bsa_attack(self.model, image, self.text, budget.steps, budget, seed=0)
                self.assertTrue(torch.equal(adv, image))

    def test_momentum_optimizer_stays_feasible(self):
        image = random_image(seed=4)
        budget = self.budget.with_changes(optimizer='mi')
        adv = bsa_attack(self.model, image, self.text, 6, budget, seed=0)
        self.assert_feasible(adv, image, budget.sigma_i)

    def test_negative_steps(self):
        with self.assertRaises(AttackError):
            bsa_attack(self.model, random_image(), self.text, -1, self.budget, seed=0)
