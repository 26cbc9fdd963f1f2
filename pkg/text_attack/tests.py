import torch
from django.test import SimpleTestCase

from blackbox.query_func import STAGE_IMPORTANCE, STAGE_TEXT, open_handle
from bsa.budget import AttackBudget
from modelzoo.exceptions import InputError
from modelzoo.testing import ScriptedTask, constant_task, random_image, tiny_model, word_trigger_task
from .substitution_func import (
    EXHAUSTED, SUCCESS, CandidateList, SubstitutionSpace, TextCandidate, content_positions,
    generate_substitutions, rank_word_importance, semantic_similarity, text_attack,
)


class SubstitutionTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.space = SubstitutionSpace.from_model(self.model)
        self.vocab = self.model.vocab
        self.text = self.vocab.encode('what color is the circle')

    def test_zero_candidates(self):
        self.assertEqual(generate_substitutions(self.space, self.text, 4, 0), [])

    def test_invalid_position(self):
        with self.assertRaises(InputError):
            generate_substitutions(self.space, self.text, 5, 3)

    def test_matches_exhaustive_scan(self):
        table = self.model.word_encoder.weight.detach()
        for position in range(len(self.text)):
            original = self.text.tokens[position]
            scored = []
            for candidate in self.vocab.word_ids:
                if candidate == original:
                    continue
                cos = torch.nn.functional.cosine_similarity(table[original], table[candidate], dim=0)
                scored.append((-float(cos), candidate))
            expected = [candidate for _, candidate in sorted(scored)[:8]]
            with self.subTest(position=position):
                self.assertEqual(generate_substitutions(self.space, self.text, position, 8), expected)

    def test_never_returns_original_or_specials(self):
        for position in range(len(self.text)):
            candidates = generate_substitutions(self.space, self.text, position, 64)
            self.assertEqual(len(candidates), 63)
            self.assertNotIn(self.text.tokens[position], candidates)
            self.assertTrue(all(self.vocab.is_word(c) for c in candidates))


class SimilarityTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.space = SubstitutionSpace.from_model(self.model)
        self.vocab = self.model.vocab

    def test_identity(self):
        text = self.vocab.encode('find the red circle')
        self.assertAlmostEqual(semantic_similarity(self.space, text, text), 1.0, places=12)

    def test_symmetry(self):
        a = self.vocab.encode('find the red circle')
        b = self.vocab.encode('locate the blue square')
        self.assertAlmostEqual(
            semantic_similarity(self.space, a, b), semantic_similarity(self.space, b, a), places=12
        )

    def test_matches_raw_table(self):
        a = self.vocab.encode('find the red circle')
        b = self.vocab.encode('find the red square')
        table = self.model.word_encoder.weight.detach()
        mean_a = table[list(a.tokens)].mean(dim=0)
        mean_b = table[list(b.tokens)].mean(dim=0)
        expected = float(torch.dot(mean_a, mean_b) / (mean_a.norm() * mean_b.norm()))
        self.assertAlmostEqual(semantic_similarity(self.space, a, b), expected, places=10)


class ImportanceTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.space = SubstitutionSpace.from_model(self.model)
        self.vocab = self.model.vocab
        self.image = random_image()
        self.budget = AttackBudget()

    def handle(self, task, text):
        return open_handle(task, self.image, text, self.budget, self.space.encoder)

    def test_single_word(self):
        text = self.vocab.encode('circle')
        order, _ = rank_word_importance(self.handle(constant_task(), text), self.image, text, self.vocab)
        self.assertEqual(order, [0])

    def test_stop_words_only(self):
        text = self.vocab.encode('is the')
        self.assertEqual(content_positions(text, self.vocab), [0, 1])

    def test_flip_outranks_unchanged(self):
        circle = self.vocab.stoi['circle']
        task = ScriptedTask(lambda image, text: (0, 0.9) if circle in text.tokens else (1, 0.6))
        text = self.vocab.encode('red circle')
        handle = self.handle(task, text)
        order, scores = rank_word_importance(handle, self.image, text, self.vocab)
        self.assertEqual(order, [1, 0])
        self.assertAlmostEqual(scores[1], 1.5)
        self.assertEqual(handle.ledger.by_stage[STAGE_IMPORTANCE], 2)

    def test_matches_brute_force_drops(self):
        weights = {self.vocab.stoi['describe']: 0.05, self.vocab.stoi['red']: 0.3, self.vocab.stoi['circle']: 0.2}
        task = ScriptedTask(lambda image, text: (0, 0.4 + sum(weights.get(t, 0.0) for t in text.tokens)))
        text = self.vocab.encode('describe red circle')
        order, _ = rank_word_importance(self.handle(task, text), self.image, text, self.vocab)

        original = task.predict(self.image, [text])[0].confidence
        drops = {}
        for position in range(len(text)):
            masked = text.replace(position, self.vocab.unk_id, self.vocab)
            drops[position] = original - task.predict(self.image, [masked])[0].confidence
        self.assertEqual(order, sorted(drops, key=lambda p: (-drops[p], p)))
        self.assertEqual(order, [1, 2, 0])


class CandidateListTests(SimpleTestCase):

    def test_ranking_order(self):
        vocab = tiny_model().vocab
        text = vocab.encode('red circle')
        entries = [
            TextCandidate(text, 0.97, 1, 1, 30),
            TextCandidate(text, 0.99, 1, 1, 40),
            TextCandidate(text, 0.97, 0, 1, 50),
            TextCandidate(text, 0.97, 1, 1, 20),
        ]
        ranked = CandidateList(entries).ranked()
        self.assertEqual(
            [(c.similarity, c.substituted_position, c.new_word) for c in ranked],
            [(0.99, 1, 40), (0.97, 0, 50), (0.97, 1, 20), (0.97, 1, 30)],
        )


class TextAttackTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.space = SubstitutionSpace.from_model(self.model)
        self.vocab = self.model.vocab
        self.image = random_image()
        self.text = self.vocab.encode('what color is the circle')

    def run_attack(self, task, budget, k=4):
        handle = open_handle(task, self.image, self.text, budget, self.space.encoder)
        return handle, text_attack(handle, self.image, self.text, budget, self.space, k)

    def test_impossible_gate(self):
        handle, outcome = self.run_attack(constant_task(), AttackBudget(sigma_s=1.0 + 1e-9))
        self.assertEqual(outcome.status, EXHAUSTED)
        self.assertEqual(len(outcome.candidates), 0)
        self.assertEqual(outcome.candidate_queries, 0)
        self.assertEqual(handle.ledger.by_stage[STAGE_TEXT], 0)
        self.assertEqual(outcome.importance_queries, 3)

    def test_gate_soundness_and_accounting(self):
        budget = AttackBudget()
        handle, outcome = self.run_attack(constant_task(), budget, k=8)
        self.assertEqual(outcome.status, EXHAUSTED)
        stored = {(c.substituted_position, c.new_word) for c in outcome.candidates}
        for candidate in outcome.candidates:
            self.assertGreater(candidate.similarity, budget.sigma_s)
            self.assertEqual(len(self.text.differing_positions(candidate.text)), 1)
        rejected = 0
        for position in outcome.order:
            for new_word in generate_substitutions(self.space, self.text, position, 8):
                if (position, new_word) in stored:
                    continue
                perturbed = self.text.replace(position, new_word, self.vocab)
                self.assertLessEqual(semantic_similarity(self.space, self.text, perturbed), budget.sigma_s)
                rejected += 1
        self.assertEqual(rejected, outcome.rejected)
        self.assertEqual(handle.ledger.by_stage[STAGE_TEXT], len(outcome.candidates))
        self.assertEqual(outcome.candidate_queries, len(outcome.candidates))

    def test_stops_at_flipping_candidate(self):
        budget = AttackBudget(sigma_s=0.1)
        neighbours = generate_substitutions(self.space, self.text, 0, 8)
        position = next(i for i, w in enumerate(neighbours) if i > 0 and w not in self.text.tokens)
        trigger = neighbours[position]
        expected = sum(
            1 for w in neighbours[:position + 1]
            if semantic_similarity(self.space, self.text, self.text.replace(0, w, self.vocab)) > 0.1
        )

        _, outcome = self.run_attack(word_trigger_task([trigger]), budget, k=8)
        self.assertEqual(outcome.status, SUCCESS)
        self.assertTrue(outcome.success)
        self.assertEqual(outcome.adversarial_text.tokens[0], trigger)
        self.assertEqual(len(outcome.candidates), expected)
        self.assertEqual(outcome.candidates[-1].new_word, trigger)

    def test_deterministic(self):
        _, first = self.run_attack(constant_task(), AttackBudget(sigma_s=0.5))
        _, second = self.run_attack(constant_task(), AttackBudget(sigma_s=0.5))
        self.assertEqual(first.candidates.to_dicts(), second.candidates.to_dicts())
