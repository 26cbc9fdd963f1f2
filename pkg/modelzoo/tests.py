import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase, TestCase

from harness.dataset_func import pretraining_corpus, synthesize_dataset
from .checkpoint_func import (
    load_pretrained, load_task, read_container, register_checkpoint, save_pretrained, save_task,
    write_container,
)
from .exceptions import ConfigurationError, InputError, TrainingError
from .models import Checkpoint
from .networks import (
    ModelConfig, SentenceEncoder, VisionLanguageModel, encode_sentence, forward_with_features,
)
from .tasks import (
    CLASSIFICATION, GROUNDING, SEQUENCE_GENERATION, Prediction, check_structure, resolve_task_kind,
)
from .testing import random_image, tiny_config, tiny_model
from .training_func import fine_tune, pretrain
from .vocab import COLORS, Vocabulary, batch_tokens


QUICK = {'epochs': 1, 'batch_size': 8}


class VocabularyTests(SimpleTestCase):

    def test_size_for_default_canvas(self):
        self.assertEqual(len(Vocabulary(32)), 5 + 64 + 33)

    def test_unknown_words_map_to_unk(self):
        vocab = Vocabulary()
        sequence = vocab.encode('what color is the zebra')
        self.assertEqual(sequence.tokens[-1], vocab.unk_id)
        self.assertEqual(len(sequence), 5)

    def test_empty_text_rejected(self):
        with self.assertRaises(InputError):
            Vocabulary().encode('   ')

    def test_replace_outside_text(self):
        vocab = Vocabulary()
        sequence = vocab.encode('red circle')
        with self.assertRaises(InputError):
            sequence.replace(2, vocab.unk_id, vocab)

    def test_over_long_text_is_truncated_with_a_warning(self):
        vocab = Vocabulary()
        sequence = vocab.encode('what is the color of the red circle on the left here')
        with self.assertLogs('modelzoo.vocab', level='WARNING') as logs:
            ids, mask = batch_tokens([sequence], 8, vocab.pad_id)
        self.assertIn('from 12 to 8 tokens', logs.output[0])
        self.assertEqual(ids[0].tolist(), list(sequence.tokens[:8]))
        self.assertFalse(bool(mask.any()))

    def test_replace_changes_one_position(self):
        vocab = Vocabulary()
        sequence = vocab.encode('what color is the circle')
        changed = sequence.replace(4, vocab.stoi['square'], vocab)
        self.assertEqual(sequence.differing_positions(changed), [4])
        self.assertEqual(changed.text, 'what color is the square')


class NetworkTests(SimpleTestCase):

    def test_invalid_structure(self):
        with self.assertRaises(ConfigurationError):
            VisionLanguageModel(tiny_config(structure='decoder_only'))

    def test_patch_size_must_divide_image(self):
        with self.assertRaises(ConfigurationError):
            tiny_config(image_size=8, patch_size=3).validate()

    def test_same_seed_same_weights(self):
        a = tiny_model(seed=3)
        b = tiny_model(seed=3)
        for (name, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
            self.assertTrue(torch.equal(p, q), name)

    def test_feature_stack_shapes(self):
        model = tiny_model()
        text = model.vocab.encode('what color is the circle')
        features = forward_with_features(model, random_image(), text)
        image_shapes, fusion_shapes = features.shapes()
        self.assertEqual(image_shapes, [(1, 4, 16), (1, 4, 16)])
        self.assertEqual(fusion_shapes, [(1, 4, 16), (1, 4, 16)])
        self.assertEqual(features.vector_count, 16)

    def test_out_of_vocabulary_token(self):
        model = tiny_model()
        text = model.vocab.encode('red circle')
        bad = type(text)(tokens=(10_000,), words=('x',))
        with self.assertRaises(InputError):
            forward_with_features(model, random_image(), bad)

    def test_wrong_image_shape(self):
        model = tiny_model()
        with self.assertRaises(InputError):
            forward_with_features(model, torch.zeros(4, 4, 3, dtype=torch.float64), model.vocab.encode('red'))

    def test_sentence_similarity(self):
        model = tiny_model()
        encoder = SentenceEncoder.from_model(model)
        vocab = model.vocab
        a = vocab.encode('what color is the circle')
        b = vocab.encode('what color is the square')
        self.assertAlmostEqual(encoder.similarity(a, a), 1.0, places=12)
        self.assertAlmostEqual(encoder.similarity(a, b), encoder.similarity(b, a), places=12)

    def test_one_pixel_moves_every_feature_level(self):
        model = tiny_model()
        text = model.vocab.encode('what color is the circle')
        image = random_image()
        moved = image.clone()
        moved[3, 5, 1] += 0.05
        before = forward_with_features(model, image, text)
        after = forward_with_features(model, moved, text)
        self.assertFalse(torch.equal(before.image_blocks[0], after.image_blocks[0]))
        self.assertFalse(torch.equal(before.fusion_blocks[-1], after.fusion_blocks[-1]))

    def test_generation_stops_at_end_token(self):
        model = tiny_model('encoder_decoder')
        vocab = model.vocab
        hidden, memory_mask, _ = model(torch.stack([random_image(seed=s) for s in range(3)]),
                                       [vocab.encode('describe the left object')] * 3)
        for tokens, probs in model.generate(hidden, memory_mask, (vocab.end_id,)):
            self.assertEqual(tokens, [vocab.end_id])
            self.assertEqual(len(probs), 1)

    def test_generation_stops_at_length_cap(self):
        model = tiny_model('encoder_decoder')
        vocab = model.vocab
        hidden, memory_mask, _ = model(random_image(), [vocab.encode('describe the left object')])
        for steps in (None, 2):
            (tokens, probs), = model.generate(hidden, memory_mask, vocab.word_ids, steps=steps)
            self.assertEqual(len(tokens), steps or model.config.max_generation_length)
            self.assertEqual(len(probs), len(tokens))
            self.assertNotIn(vocab.end_id, tokens)

    def test_sentence_embedding_is_normalised_mean(self):
        model = tiny_model()
        vocab = model.vocab
        table = model.word_encoder.weight.detach()
        red, circle = vocab.stoi['red'], vocab.stoi['circle']
        expected = (table[red] + table[circle]) / 2
        expected = expected / expected.norm()
        embedding = encode_sentence(model, vocab.encode('red circle'))
        self.assertTrue(torch.allclose(embedding, expected, atol=1e-12))
        self.assertAlmostEqual(float(embedding.norm()), 1.0, places=12)

    def test_sentence_encoder_keeps_its_table(self):
        model = tiny_model()
        encoder = SentenceEncoder.from_model(model)
        text = model.vocab.encode('red circle')
        before = encoder.encode(text).clone()
        with torch.no_grad():
            model.word_encoder.weight.add_(1.0)
        self.assertTrue(torch.equal(before, encoder.encode(text)))


class TaskTests(SimpleTestCase):

    def test_encoder_only_cannot_generate(self):
        with self.assertRaises(ConfigurationError):
            check_structure('encoder_only', SEQUENCE_GENERATION)

    def test_task_aliases(self):
        self.assertEqual(resolve_task_kind('generation'), SEQUENCE_GENERATION)
        with self.assertRaises(ConfigurationError):
            resolve_task_kind('captioning')

    def test_malformed_box(self):
        with self.assertRaises(InputError):
            Prediction(kind=GROUNDING, confidence=0.5, box=(4, 0, 2, 2))


class TrainingTests(SimpleTestCase):

    def setUp(self):
        self.corpus = pretraining_corpus(16, seed=0, image_size=16)

    def test_empty_corpus(self):
        with self.assertRaises(TrainingError):
            pretrain(tiny_model(image_size=16, patch_size=8), [], recipe=QUICK)

    def test_pretrain_records_losses(self):
        model = pretrain(tiny_model(image_size=16, patch_size=8), self.corpus, recipe=QUICK)
        self.assertEqual(len(model.loss_history), 1)
        self.assertFalse(model.training)

    def test_fine_tune_leaves_pretrained_model_untouched(self):
        model = tiny_model(image_size=16, patch_size=8)
        before = {name: p.clone() for name, p in model.state_dict().items()}
        data = synthesize_dataset(CLASSIFICATION, 16, seed=1, image_size=16)
        task = fine_tune(model, data.samples, CLASSIFICATION, recipe=QUICK, heldout=data.samples[:8])
        for name, p in model.state_dict().items():
            self.assertTrue(torch.equal(before[name], p), name)
        self.assertEqual(len(task.label_space), len(COLORS))
        self.assertGreaterEqual(task.heldout_metrics['accuracy'], 0.0)
        self.assertLessEqual(task.heldout_metrics['accuracy'], 1.0)

    def test_fine_tune_moves_every_parameter_block(self):
        for structure, task_kind in (('encoder_only', CLASSIFICATION), ('encoder_decoder', SEQUENCE_GENERATION)):
            model = tiny_model(structure, image_size=16, patch_size=8)
            data = synthesize_dataset(task_kind, 16, seed=1, image_size=16)
            task = fine_tune(model, data.samples, task_kind, recipe=QUICK)
            tuned = dict(task._model.named_parameters())
            for name, parameter in model.named_parameters():
                with self.subTest(structure=structure, parameter=name):
                    self.assertGreater(float((tuned[name] - parameter).norm()), 0.0)

    def test_matching_weight_must_be_positive(self):
        data = synthesize_dataset(CLASSIFICATION, 8, seed=1, image_size=16)
        with self.assertRaises(TrainingError):
            fine_tune(tiny_model(image_size=16, patch_size=8), data.samples, CLASSIFICATION,
                      recipe={**QUICK, 'matching_weight': 0.0})

    def test_generation_predictions(self):
        model = tiny_model('encoder_decoder', image_size=16, patch_size=8)
        data = synthesize_dataset(SEQUENCE_GENERATION, 8, seed=2, image_size=16)
        task = fine_tune(model, data.samples, SEQUENCE_GENERATION, recipe=QUICK)
        vocab = task.vocab
        predictions = task.predict(
            torch.stack([torch.as_tensor(s.image) for s in data.samples[:2]]),
            [vocab.encode(s.text) for s in data.samples[:2]],
        )
        for prediction in predictions:
            self.assertEqual(prediction.kind, SEQUENCE_GENERATION)
            self.assertTrue(all(vocab.is_word(t) for t in prediction.tokens))
            self.assertTrue(0.0 < prediction.confidence <= 1.0)

    def test_grounding_predictions_are_boxes(self):
        model = tiny_model(image_size=16, patch_size=8)
        data = synthesize_dataset(GROUNDING, 8, seed=3, image_size=16)
        task = fine_tune(model, data.samples, GROUNDING, recipe=QUICK, heldout=data.samples)
        self.assertIn('mean_iou', task.heldout_metrics)
        prediction = task.predict(torch.as_tensor(data[0].image), [task.vocab.encode(data[0].text)])[0]
        x1, y1, x2, y2 = prediction.box
        self.assertTrue(0 <= x1 <= x2 <= 16 and 0 <= y1 <= y2 <= 16)


class CheckpointTests(TestCase):

    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())

    def test_container_preserves_arrays(self):
        arrays = {'a': torch.arange(6, dtype=torch.float64).reshape(2, 3).numpy()}
        path = write_container(self.directory / 'x.vlck', arrays, {'kind': 'test'})
        metadata, loaded = read_container(path)
        self.assertEqual(metadata, {'kind': 'test'})
        self.assertEqual(loaded['a'].tolist(), arrays['a'].tolist())

    def test_not_a_container(self):
        path = self.directory / 'junk.vlck'
        path.write_bytes(b'nope' + bytes(16))
        with self.assertRaises(InputError):
            read_container(path)

    def test_pretrained_reload_gives_same_features(self):
        model = tiny_model(seed=5)
        path = save_pretrained(model, self.directory / 'f.vlck')
        loaded = load_pretrained(path)
        text = model.vocab.encode('what color is the circle')
        image = random_image()
        a = forward_with_features(model, image, text)
        b = forward_with_features(loaded, image, text)
        for x, y in zip(a.image_blocks + a.fusion_blocks, b.image_blocks + b.fusion_blocks):
            self.assertTrue(torch.allclose(x, y))
        with self.assertRaises(InputError):
            load_task(path)

    def test_task_reload_and_registry(self):
        model = tiny_model(image_size=16, patch_size=8)
        data = synthesize_dataset(CLASSIFICATION, 8, seed=4, image_size=16)
        task = fine_tune(model, data.samples, CLASSIFICATION, recipe=QUICK)
        path = save_task(task, self.directory / 's.vlck')
        loaded = load_task(path)
        images = torch.stack([torch.as_tensor(s.image) for s in data.samples])
        texts = [task.vocab.encode(s.text) for s in data.samples]
        self.assertEqual(
            [p.label for p in task.predict(images, texts)],
            [p.label for p in loaded.predict(images, texts)],
        )

        register_checkpoint('s', path, 'encoder_only', 0, task_kind=CLASSIFICATION, metrics={'accuracy': 1.0})
        register_checkpoint('s', path, 'encoder_only', 1, task_kind=CLASSIFICATION)
        checkpoint = Checkpoint.objects.get(name='s')
        self.assertEqual(Checkpoint.objects.count(), 1)
        self.assertEqual(checkpoint.seed, 1)
        self.assertFalse(checkpoint.is_pretrained)


class ConfigTests(SimpleTestCase):

    def test_round_trip_through_dict(self):
        config = tiny_config('encoder_decoder')
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)
