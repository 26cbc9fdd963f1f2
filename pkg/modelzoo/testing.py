# modelzoo/testing.py
"""
Small models and scripted black-box tasks for the test suites
"""

import numpy as np
import torch

from .networks import ModelConfig, build_pretrained
from .tasks import CLASSIFICATION, Prediction
from .vocab import Vocabulary


def tiny_config(structure='encoder_only', image_size=8, patch_size=4, **overrides):
    values = {
        'structure': structure,
        'image_size': image_size,
        'patch_size': patch_size,
        'width': 16,
        'heads': 2,
        'mlp_ratio': 2,
        'image_blocks': 2,
        'fusion_blocks': 2,
        'decoder_blocks': 1,
        'max_text_length': 8,
        'max_generation_length': 4,
        'dtype': 'float64',
    }
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(structure='encoder_only', seed=0, **overrides):
    return build_pretrained(tiny_config(structure, **overrides), seed)


def random_image(size=8, seed=0):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.uniform(0.1, 0.9, size=(size, size, 3)), dtype=torch.float64)


class ScriptedTask:
    """
    Stand-in for a fine-tuned classifier. ``decide(image, text)`` returns
    (label, confidence); ``calls`` counts predicted rows.
    """

    task_kind = CLASSIFICATION
    structure = 'encoder_only'

    def __init__(self, decide, image_size=8):
        self.decide = decide
        self.vocab = Vocabulary(image_size)
        self.image_size = image_size
        self.calls = 0

    def predict(self, images, texts):
        images = torch.as_tensor(images)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        predictions = []
        for image, text in zip(images, texts):
            self.calls += 1
            label, confidence = self.decide(image, text)
            predictions.append(Prediction(kind=CLASSIFICATION, confidence=float(confidence), label=int(label)))
        return predictions


def constant_task(image_size=8, confidence=0.9):
    """Never changes its answer"""
    return ScriptedTask(lambda image, text: (0, confidence), image_size)


def word_trigger_task(trigger_ids, image_size=8):
    """Flips to label 1 as soon as one of ``trigger_ids`` appears in the text"""
    triggers = set(trigger_ids)
    return ScriptedTask(
        lambda image, text: (1, 0.8) if triggers & set(text.tokens) else (0, 0.9),
        image_size,
    )


def image_trigger_task(reference, threshold, image_size=8):
    """Flips once the mean absolute pixel change from ``reference`` exceeds ``threshold``"""
    reference = torch.as_tensor(reference, dtype=torch.float64)

    def decide(image, text):
        change = float((image.to(torch.float64) - reference).abs().mean())
        return (1, 0.7) if change > threshold else (0, 0.9)

    return ScriptedTask(decide, image_size)


def pair_trigger_task(reference, trigger_ids, image_size=8):
    """Flips only for a perturbed image together with a trigger word"""
    reference = torch.as_tensor(reference, dtype=torch.float64)
    triggers = set(trigger_ids)

    def decide(image, text):
        moved = bool((image.to(torch.float64) - reference).abs().max() > 0)
        return (1, 0.6) if moved and triggers & set(text.tokens) else (0, 0.9)

    return ScriptedTask(decide, image_size)
