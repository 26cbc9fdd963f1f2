import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, TestCase, override_settings, tag
from django.conf import settings
from PIL import Image

from bsa.budget import AttackBudget
from icsa.search_func import FAILURE, SUCCESS_IMAGE, SUCCESS_MULTIMODAL, SUCCESS_TEXT
from modelzoo.exceptions import ConfigurationError, EvaluationError
from modelzoo.tasks import CLASSIFICATION, GROUNDING, SEQUENCE_GENERATION
from modelzoo.testing import ScriptedTask, constant_task, tiny_model
from modelzoo.training_func import evaluate_task
from modelzoo.vocab import COLORS, POSITIONS, Vocabulary
from .cli_func import HELDOUT_SEED_OFFSET, load_lab
from .dataset_func import (
    CAPTION_FORMS, COLOR_RGB, PRETRAINING, TEMPLATES, Sample, ShapeDataset, caption_for, load_dataset,
    pretraining_corpus, save_dataset, synthesize_dataset,
)
from .eval_func import (
    ABLATION_MODES, BSA, BSA_BA, BSA_BA_Q, IE, MI_VARIANT, MODES, RANDOM_NOISE, TE, VLATTACK, EvalConfig,
    check_containment, evaluate, run_ablation, run_sweep, sample_seeds,
)
from .models import EvaluationRun
from .report_func import (
    EvalReport, asr_percent, emit_report, emit_table, load_report, render_bar_chart, strip_volatile,
    validate_report,
)


QUESTION = 'what color is the circle'


def flat_dataset(count=4, label=0, image_size=8):
    """Uniform grey canvases, so any perturbation is visible to a scripted task"""
    samples = [
        Sample(image=np.full((image_size, image_size, 3), 0.5), text=QUESTION, label=label)
        for _ in range(count)
    ]
    return ShapeDataset(task_kind=CLASSIFICATION, seed=0, samples=samples, image_size=image_size)


def scripted_task(needs_moved_image=False, needs_changed_text=False):
    """Flips on a moved image and/or a substituted question"""
    vocab = Vocabulary(8)
    original = vocab.encode(QUESTION).tokens

    def decide(image, text):
        moved = bool((image != 0.5).any())
        changed = text.tokens != original and vocab.unk_id not in text.tokens
        if (moved or not needs_moved_image) and (changed or not needs_changed_text):
            return 1, 0.6
        return 0, 0.9

    return ScriptedTask(decide)


def fake_report(statuses, seed=0):
    samples = [
        {'index': i, 'status': status, 'queries_used': 2, 'image_iterations_used': 40}
        for i, status in enumerate(statuses)
    ]
    return EvalReport(config={'mode': VLATTACK}, seed=seed, samples=samples)


class DatasetTests(SimpleTestCase):

    def test_same_seed_same_samples(self):
        a = synthesize_dataset(CLASSIFICATION, 12, seed=5)
        b = synthesize_dataset(CLASSIFICATION, 12, seed=5)
        for x, y in zip(a, b):
            self.assertEqual(x.text, y.text)
            self.assertEqual(x.label, y.label)
            self.assertTrue(np.array_equal(x.image, y.image))
        c = synthesize_dataset(CLASSIFICATION, 12, seed=6)
        self.assertNotEqual([s.text for s in a] + [s.label for s in a], [s.text for s in c] + [s.label for s in c])

    def test_invalid_requests(self):
        with self.assertRaises(ConfigurationError):
            synthesize_dataset(CLASSIFICATION, 0, seed=0)
        with self.assertRaises(ConfigurationError):
            synthesize_dataset('captioning', 4, seed=0)

    def test_objects_fit_their_slots(self):
        for sample in synthesize_dataset(GROUNDING, 60, seed=1):
            self.assertTrue(1 <= len(sample.objects) <= 3)
            self.assertEqual(len({obj.position for obj in sample.objects}), len(sample.objects))
            self.assertEqual(len({obj.shape for obj in sample.objects}), len(sample.objects))
            for obj in sample.objects:
                x1, y1, x2, y2 = obj.box
                self.assertTrue(0 <= x1 < x2 <= 32 and 0 <= y1 < y2 <= 32)
                self.assertTrue(6 <= x2 - x1 <= 8)
                self.assertIn(obj.position, POSITIONS)
            self.assertEqual(sample.label, sample.objects[0].box)

    def test_target_colour_is_drawn(self):
        for sample in synthesize_dataset(CLASSIFICATION, 30, seed=2):
            target = sample.objects[0]
            x1, y1, x2, y2 = target.box
            centre = sample.image[y1 + (y2 - y1) // 2, x1 + (x2 - x1) // 2]
            self.assertTrue(np.allclose(centre, np.array(COLOR_RGB[target.color]) / 255.0))
            self.assertEqual(COLORS[sample.label], target.color)
            self.assertIn(target.shape, sample.text)

    def test_colour_labels_are_balanced(self):
        counts = synthesize_dataset(CLASSIFICATION, 2000, seed=3, image_size=16).label_counts()
        self.assertEqual(set(counts), set(range(len(COLORS))))
        expected = 2000 / len(COLORS)
        for label, count in counts.items():
            self.assertLess(abs(count - expected), 0.2 * expected, COLORS[label])

    def test_generation_labels_name_the_object(self):
        vocab = Vocabulary()
        lengths = set()
        for sample in synthesize_dataset(SEQUENCE_GENERATION, 60, seed=4):
            target = sample.objects[0]
            words = vocab.decode(sample.label).split()
            self.assertEqual(sample.label, sample.caption)
            self.assertTrue(2 <= len(words) <= 4, words)
            self.assertIn(target.color, words)
            self.assertEqual(words[words.index(target.color) + 1], target.shape)
            self.assertIn(target.position, sample.text)
            if len(words) == 4:
                self.assertEqual(words[2:], ['on', target.position])
            lengths.add(len(words))
        self.assertEqual(lengths, {2, 3, 4})

    def test_caption_length_follows_the_question(self):
        vocab = Vocabulary()
        for sample in synthesize_dataset(SEQUENCE_GENERATION, 30, seed=5):
            template = sample.text.replace(sample.objects[0].position, '{position}')
            form = CAPTION_FORMS[TEMPLATES[SEQUENCE_GENERATION].index(template)]
            self.assertEqual(sample.label, caption_for(vocab, sample.objects[0], form))

    def test_pretraining_corpus_has_descriptions(self):
        corpus = pretraining_corpus(5, seed=0)
        for sample in corpus:
            self.assertIsNone(sample.label)
            self.assertIn(sample.objects[0].color, sample.text)

    def test_save_and_load(self):
        dataset = synthesize_dataset(GROUNDING, 6, seed=7)
        path, manifest = save_dataset(dataset, Path(tempfile.mkdtemp()) / 'ground.vlck')
        self.assertTrue(manifest.exists())
        loaded = load_dataset(path)
        self.assertEqual(loaded.task_kind, GROUNDING)
        self.assertEqual([s.label for s in loaded], [s.label for s in dataset])
        self.assertEqual([s.objects for s in loaded], [s.objects for s in dataset])
        self.assertTrue(np.array_equal(loaded[3].image, dataset[3].image))

    def test_small_canvas_renders(self):
        dataset = synthesize_dataset(PRETRAINING, 20, seed=8, image_size=8)
        self.assertEqual(dataset[0].image.shape, (8, 8, 3))


class ReportTests(SimpleTestCase):

    def test_asr_rounding(self):
        self.assertEqual(asr_percent(1, 3), 33.33)
        self.assertEqual(asr_percent(2, 3), 66.67)
        self.assertEqual(asr_percent(0, 0), 0.0)

    def test_aggregates(self):
        report = fake_report([SUCCESS_IMAGE, SUCCESS_TEXT, FAILURE, SUCCESS_MULTIMODAL])
        self.assertEqual(report.asr_percent, 75.0)
        self.assertEqual(report.successes_by_stage, {'image': 1, 'text': 1, 'multimodal': 1})
        self.assertEqual(report.successful_indices, {0, 1, 3})
        self.assertEqual(report.mean_queries, 2.0)
        self.assertEqual(report.version, settings.VERSION)

    def test_emit_and_load(self):
        report = fake_report([SUCCESS_IMAGE, FAILURE])
        path = emit_report(report, Path(tempfile.mkdtemp()) / 'nested' / 'report.json')
        loaded = load_report(path)
        self.assertEqual(strip_volatile(loaded.to_dict()), strip_volatile(report.to_dict()))

    def test_schema_errors(self):
        good = fake_report([SUCCESS_IMAGE, FAILURE]).to_dict()
        broken = (
            {key: value for key, value in good.items() if key != 'seed'},
            {**good, 'attempted': 3},
            {**good, 'asr_percent': 120.0},
            {**good, 'asr_percent': 40.0},
            {**good, 'successes_by_stage': {'image': 1}},
            {**good, 'samples': [{'index': 0, 'status': FAILURE}, good['samples'][1]]},
        )
        validate_report(good)
        for data in broken:
            with self.assertRaises(ValidationError):
                validate_report(data)

    def test_table_and_chart(self):
        rows = [{'mode': mode, 'asr_percent': 10.0 * i} for i, mode in enumerate(ABLATION_MODES)]
        directory = Path(tempfile.mkdtemp())
        with open(emit_table(rows, directory / 'ablation.json', title='ablation')) as handle:
            self.assertEqual(json.load(handle)['rows'], rows)
        chart = render_bar_chart(rows, directory / 'ablation.png')
        with Image.open(chart) as image:
            self.assertEqual(image.size, (480, 260))


class EvalConfigTests(SimpleTestCase):

    def test_validation(self):
        budget = AttackBudget()
        for changes in ({'mode': 'PGD'}, {'sample_count': 0}, {'workers': 0}):
            with self.subTest(changes=changes):
                with self.assertRaises(ConfigurationError):
                    EvalConfig(**{'mode': VLATTACK, 'task_kind': CLASSIFICATION, 'sample_count': 4,
                                  'budget': budget, **changes})

    def test_momentum_variant_switches_optimizer(self):
        config = EvalConfig(mode=MI_VARIANT, task_kind=CLASSIFICATION, sample_count=4, budget=AttackBudget())
        self.assertEqual(config.to_dict()['budget']['optimizer'], 'mi')
        self.assertEqual(config.with_mode(VLATTACK).attack_budget.optimizer, 'pgd')

    def test_seeds_depend_only_on_index(self):
        self.assertEqual(sample_seeds(0, 5)[:3], sample_seeds(0, 3))
        self.assertNotEqual(sample_seeds(0, 3), sample_seeds(1, 3))
        self.assertEqual(len(set(sample_seeds(0, 50))), 50)


class EvaluateTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.budget = AttackBudget(sigma_s=0.1, steps=8, init_steps=4)

    def config(self, mode, **changes):
        changes.setdefault('budget', self.budget)
        return EvalConfig(mode=mode, task_kind=CLASSIFICATION, sample_count=3, **changes)

    def test_attacks_only_correct_samples(self):
        dataset = flat_dataset(4)
        dataset.samples[1] = Sample(image=dataset[1].image, text=QUESTION, label=2)
        report = evaluate(self.config(VLATTACK), self.model, constant_task(), dataset, progress=False)
        self.assertEqual([entry['index'] for entry in report.samples], [0, 2, 3])
        self.assertEqual(report.asr_percent, 0.0)

    def test_nothing_to_attack(self):
        with self.assertRaises(EvaluationError):
            evaluate(self.config(VLATTACK), self.model, constant_task(), flat_dataset(label=3), progress=False)

    def test_task_mismatch(self):
        config = EvalConfig(mode=VLATTACK, task_kind=GROUNDING, sample_count=3, budget=self.budget)
        with self.assertRaises(ConfigurationError):
            evaluate(config, self.model, constant_task(), flat_dataset(), progress=False)

    def test_zero_radius_noise_never_succeeds(self):
        task = scripted_task(needs_moved_image=True)
        config = self.config(RANDOM_NOISE, budget=self.budget.with_changes(sigma_i=0.0))
        report = evaluate(config, self.model, task, flat_dataset(), progress=False)
        self.assertEqual(report.asr_percent, 0.0)
        self.assertEqual(report.mean_queries, 1.0)

        report = evaluate(self.config(RANDOM_NOISE), self.model, task, flat_dataset(), progress=False)
        self.assertEqual(report.asr_percent, 100.0)
        self.assertEqual(report.successes_by_stage['image'], 3)

    def test_threaded_run_matches_serial(self):
        task = scripted_task(needs_moved_image=True, needs_changed_text=True)
        serial = evaluate(self.config(VLATTACK), self.model, task, flat_dataset(), progress=False)
        threaded = evaluate(self.config(VLATTACK, workers=2), self.model, task, flat_dataset(), progress=False)
        summary = lambda report: [(e['index'], e['status'], e['queries_used']) for e in report.samples]
        self.assertEqual(summary(serial), summary(threaded))

    def test_repeated_runs_match(self):
        task = scripted_task(needs_moved_image=True, needs_changed_text=True)
        first = evaluate(self.config(VLATTACK), self.model, task, flat_dataset(), progress=False)
        second = evaluate(self.config(VLATTACK), self.model, task, flat_dataset(), progress=False)
        self.assertEqual(strip_volatile(first.to_dict()), strip_volatile(second.to_dict()))

    def test_hard_label_mode(self):
        task = scripted_task(needs_changed_text=True)
        report = evaluate(self.config(VLATTACK, hard_label=True), self.model, task, flat_dataset(), progress=False)
        self.assertEqual(report.successes_by_stage['text'], 3)
        self.assertTrue(report.config['hard_label'])


class AblationTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.budget = AttackBudget(sigma_s=0.1, steps=8, init_steps=4)

    def ablate(self, task):
        rows, reports = run_ablation(self.model, task, flat_dataset(), self.budget, seed=0,
                                     sample_count=3, progress=False)
        return {row['mode']: row['asr_percent'] for row in rows}, reports

    def test_text_only_weakness(self):
        asr, _ = self.ablate(scripted_task(needs_changed_text=True))
        self.assertEqual(list(asr), list(ABLATION_MODES))
        self.assertEqual([asr[m] for m in (IE, TE, BSA)], [0.0, 0.0, 0.0])
        self.assertEqual([asr[m] for m in (BSA_BA, BSA_BA_Q, VLATTACK)], [100.0, 100.0, 100.0])

    def test_pair_weakness_needs_the_cross_search(self):
        asr, reports = self.ablate(scripted_task(needs_moved_image=True, needs_changed_text=True))
        self.assertEqual([asr[m] for m in (IE, TE, BSA, BSA_BA)], [0.0, 0.0, 0.0, 0.0])
        self.assertEqual(asr[BSA_BA_Q], 100.0)
        self.assertEqual(asr[VLATTACK], 100.0)
        self.assertEqual(reports[VLATTACK].successes_by_stage['multimodal'], 3)
        for entry in reports[BSA_BA_Q].samples:
            self.assertEqual(entry['candidate_index'], 0)

    def test_image_weakness_breaks_every_mode(self):
        asr, _ = self.ablate(scripted_task(needs_moved_image=True))
        self.assertEqual(set(asr.values()), {100.0})

    def test_containment_violation(self):
        reports = {
            BSA: fake_report([SUCCESS_IMAGE, FAILURE]),
            BSA_BA: fake_report([FAILURE, SUCCESS_TEXT]),
        }
        with self.assertRaises(EvaluationError):
            check_containment(reports)
        reports[BSA_BA] = fake_report([SUCCESS_IMAGE, SUCCESS_TEXT])
        check_containment(reports)

    def test_sweep_rows(self):
        grid = ((4, 2), (8, 4), (8, 8))
        rows = run_sweep(self.model, scripted_task(needs_changed_text=True), flat_dataset(), self.budget,
                         seed=0, sample_count=2, grid=grid, progress=False)
        self.assertEqual([(row['steps'], row['init_steps']) for row in rows], list(grid))
        self.assertEqual({row['asr_percent'] for row in rows}, {100.0})


FIXTURE_DIR = Path(__file__).resolve().parent / 'fixtures'
TRAINED_LAB_FIXTURE = FIXTURE_DIR / 'trained_lab.json'

# Held-out floors of the shipped training recipe
CLASSIFICATION_ACCURACY_FLOOR = 0.95
GROUNDING_IOU_FLOOR = 0.75
GENERATION_ACCURACY_FLOOR = 0.5


@tag('slow')
class TrainedLabTests(TestCase):
    """
    Trains the default lab with the shipped recipe through the ``train``
    command, then attacks 200 correctly predicted samples in every mode.
    Measured values are written to ``fixtures/trained_lab.json`` on the
    first run and compared against it afterwards.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.directory = Path(tempfile.mkdtemp())
        cls.overrides = override_settings(VLATTACK={
            **settings.VLATTACK,
            'CHECKPOINT_DIR': cls.directory / 'checkpoints',
            'REPORT_DIR': cls.directory / 'reports',
            'DATA_DIR': cls.directory / 'data',
        })
        cls.overrides.enable()
        for structure, task in (
            ('encoder_only', 'classification'),
            ('encoder_only', 'grounding'),
            ('encoder_decoder', 'generation'),
        ):
            call_command('train', '--model', structure, '--task', task, '--seed', '0', stdout=StringIO())

    @classmethod
    def tearDownClass(cls):
        cls.overrides.disable()
        super().tearDownClass()

    def heldout_metrics(self, structure, task_kind):
        _, task = load_lab(structure, task_kind, 0)
        heldout = synthesize_dataset(
            task_kind, settings.VLATTACK['HELDOUT_SAMPLES'], HELDOUT_SEED_OFFSET, task.image_size,
        )
        return evaluate_task(task, heldout.samples)

    def evaluate_mode(self, mode, samples=200, name=None):
        out = self.directory / 'reports' / (name or f'{mode}.json')
        call_command('evaluate', '--mode', mode, '--samples', str(samples), '--seed', '0',
                     '--no-progress', '--out', str(out), stdout=StringIO())
        return load_report(out)

    def compare_with_fixture(self, measured):
        if not TRAINED_LAB_FIXTURE.exists():
            FIXTURE_DIR.mkdir(exist_ok=True)
            with open(TRAINED_LAB_FIXTURE, 'w') as handle:
                json.dump(measured, handle, indent=2, sort_keys=True)
            return
        with open(TRAINED_LAB_FIXTURE) as handle:
            recorded = json.load(handle)
        for key, value in recorded.items():
            with self.subTest(key=key):
                self.assertAlmostEqual(measured[key], value, delta=1.0 if key.startswith('asr') else 0.01)

    def test_floors_and_attack_trends(self):
        classification = self.heldout_metrics('encoder_only', CLASSIFICATION)
        grounding = self.heldout_metrics('encoder_only', GROUNDING)
        generation = self.heldout_metrics('encoder_decoder', SEQUENCE_GENERATION)
        self.assertGreaterEqual(classification['accuracy'], CLASSIFICATION_ACCURACY_FLOOR)
        self.assertGreaterEqual(grounding['mean_iou'], GROUNDING_IOU_FLOOR)
        self.assertGreaterEqual(generation['accuracy'], GENERATION_ACCURACY_FLOOR)

        reports = {mode: self.evaluate_mode(mode) for mode in MODES}
        for mode, report in reports.items():
            with self.subTest(mode=mode):
                self.assertEqual(report.attempted, 200)
                self.assertEqual(report.config['mode'], mode)
        indices = [sorted(entry['index'] for entry in report.samples) for report in reports.values()]
        self.assertTrue(all(each == indices[0] for each in indices))

        check_containment(reports)
        asr = {mode: report.asr_percent for mode, report in reports.items()}
        self.assertGreaterEqual(asr[BSA], asr[RANDOM_NOISE] + 20.0)
        self.assertGreaterEqual(asr[VLATTACK], asr[BSA] + 5.0)

        measured = {
            'classification_accuracy': classification['accuracy'],
            'grounding_mean_iou': grounding['mean_iou'],
            'generation_accuracy': generation['accuracy'],
        }
        measured.update({f'asr {mode}': value for mode, value in asr.items()})
        self.compare_with_fixture(measured)

    def test_evaluate_command_is_reproducible(self):
        first = self.evaluate_mode(VLATTACK, samples=20, name='first.json')
        second = self.evaluate_mode(VLATTACK, samples=20, name='second.json')
        self.assertEqual(strip_volatile(first.to_dict()), strip_volatile(second.to_dict()))
        self.assertEqual(EvaluationRun.objects.filter(mode=VLATTACK).count(), 2)


class RunViewTests(TestCase):

    def setUp(self):
        directory = Path(tempfile.mkdtemp())
        path = emit_report(fake_report([SUCCESS_IMAGE, FAILURE]), directory / 'report.json')
        self.run = EvaluationRun.objects.create(
            mode=VLATTACK, task_kind=CLASSIFICATION, structure='encoder_only', samples=2, attempted=2,
            asr_percent=50.0, report_path=str(path),
        )
        EvaluationRun.objects.create(
            mode=IE, task_kind=GROUNDING, structure='encoder_only', report_path=str(directory / 'missing.json'),
        )

    def test_list_and_filters(self):
        self.assertEqual(self.client.get('/runs/').json()['count'], 2)
        data = self.client.get('/runs/', {'mode': VLATTACK}).json()
        self.assertEqual(data['count'], 1)
        self.assertEqual(data['runs'][0]['asr_percent'], 50.0)
        self.assertEqual(self.client.get('/runs/', {'task': GROUNDING}).json()['runs'][0]['mode'], IE)

    def test_detail(self):
        data = self.client.get(f'/runs/{self.run.id}/').json()
        self.assertTrue(data['success'])
        self.assertEqual(data['report']['asr_percent'], 50.0)

    def test_missing_report(self):
        missing = EvaluationRun.objects.get(mode=IE)
        response = self.client.get(f'/runs/{missing.id}/')
        self.assertEqual(response.status_code, 404)
        self.assertFalse(response.json()['success'])
        self.assertEqual(self.client.get('/runs/999/').status_code, 404)

    def test_read_only(self):
        self.assertEqual(self.client.post('/runs/').status_code, 405)


class CommandTests(TestCase):

    def test_synthesize_writes_dataset(self):
        out = Path(tempfile.mkdtemp()) / 'cls.vlck'
        stdout = StringIO()
        call_command('synthesize', '--task', 'classification', '--samples', '4', '--out', str(out), stdout=stdout)
        self.assertIn('4 classification samples', stdout.getvalue())
        self.assertEqual(len(load_dataset(out)), 4)

    def test_evaluate_without_checkpoints(self):
        with override_settings(VLATTACK={**settings.VLATTACK, 'CHECKPOINT_DIR': Path(tempfile.mkdtemp())}):
            with self.assertRaises(CommandError):
                call_command('evaluate', '--samples', '2', '--no-progress', stdout=StringIO())
        self.assertEqual(EvaluationRun.objects.count(), 0)
