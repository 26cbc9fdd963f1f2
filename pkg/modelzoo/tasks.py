# modelzoo/tasks.py
"""
Downstream task heads, losses and predictions

A FineTunedTask is only ever handed to the blackbox app; attack code talks
to it through ``blackbox.query_func.QueryHandle``.
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, InputError
from .vocab import COLORS


CLASSIFICATION = 'classification'
SEQUENCE_GENERATION = 'sequence_generation'
GROUNDING = 'grounding'
TASK_KINDS = (CLASSIFICATION, SEQUENCE_GENERATION, GROUNDING)

# CLI spelling -> task kind
TASK_ALIASES = {
    'classification': CLASSIFICATION,
    'generation': SEQUENCE_GENERATION,
    'sequence_generation': SEQUENCE_GENERATION,
    'grounding': GROUNDING,
}


def resolve_task_kind(name):
    try:
        return TASK_ALIASES[name]
    except KeyError:
        raise ConfigurationError(f"Unknown task '{name}', expected one of {sorted(TASK_ALIASES)}")


@dataclass(frozen=True)
class Prediction:
    """
    Kind-tagged model output. Exactly one of label / tokens / box is set,
    matching ``kind``; ``confidence`` is the score the black box exposes.
    """
    kind: str
    confidence: float
    label: int = None
    tokens: tuple = None
    box: tuple = None

    def __post_init__(self):
        if self.kind == GROUNDING and self.box is not None:
            x1, y1, x2, y2 = self.box
            if x1 > x2 or y1 > y2:
                raise InputError(f'Malformed box {self.box}')

    @property
    def value(self):
        return {CLASSIFICATION: self.label, SEQUENCE_GENERATION: self.tokens, GROUNDING: self.box}[self.kind]

    def to_dict(self):
        data = asdict(self)
        for key in ('tokens', 'box'):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=data['kind'],
            confidence=data['confidence'],
            label=data.get('label'),
            tokens=tuple(data['tokens']) if data.get('tokens') is not None else None,
            box=tuple(data['box']) if data.get('box') is not None else None,
        )


def default_label_space(vocab, task_kind):
    if task_kind == CLASSIFICATION:
        return tuple(vocab.stoi[color] for color in COLORS)
    if task_kind == SEQUENCE_GENERATION:
        return vocab.word_ids
    if task_kind == GROUNDING:
        return vocab.location_ids
    raise ConfigurationError(f"Unknown task kind '{task_kind}'")


def check_structure(structure, task_kind):
    if task_kind not in TASK_KINDS:
        raise ConfigurationError(f"Unknown task kind '{task_kind}'")
    if structure == 'encoder_only' and task_kind == SEQUENCE_GENERATION:
        raise ConfigurationError('Sequence generation needs the encoder_decoder structure')


def validate_labels(task_kind, labels, label_space, image_size):
    """Raise ConfigurationError when labels do not fit ``task_kind``"""
    for label in labels:
        if task_kind == CLASSIFICATION:
            ok = isinstance(label, int) and 0 <= label < len(label_space)
        elif task_kind == SEQUENCE_GENERATION:
            ok = (isinstance(label, (tuple, list)) and len(label) >= 1
                  and all(token in label_space for token in label))
        else:
            ok = (isinstance(label, (tuple, list)) and len(label) == 4
                  and label[0] <= label[2] and label[1] <= label[3]
                  and all(0 <= c <= image_size for c in label))
        if not ok:
            raise ConfigurationError(f'Label {label!r} does not match task kind {task_kind}')


def attach_task_head(model, task_kind, label_space):
    """Encoder-only models get a fresh head; encoder-decoder reuse the decoder"""
    check_structure(model.structure, task_kind)
    if model.structure == 'encoder_only':
        bins = model.config.image_size + 1
        outputs = len(label_space) if task_kind == CLASSIFICATION else 4 * bins
        model.task_heads[task_kind] = nn.Linear(model.config.width, outputs).to(model.dtype)
    return model


def target_tokens(vocab, task_kind, label, label_space):
    if task_kind == CLASSIFICATION:
        return [label_space[label]]
    if task_kind == SEQUENCE_GENERATION:
        return list(label)
    return [vocab.location_id(c) for c in label]


def _box(coordinates):
    x_a, y_a, x_b, y_b = (int(c) for c in coordinates)
    return (min(x_a, x_b), min(y_a, y_b), max(x_a, x_b), max(y_a, y_b))


def task_loss(model, task_kind, label_space, images, texts, labels):
    hidden, memory_mask, _ = model(images, texts)
    if model.structure == 'encoder_only':
        logits = model.task_heads[task_kind](hidden[:, 0])
        if task_kind == CLASSIFICATION:
            return F.cross_entropy(logits, torch.tensor(labels, dtype=torch.long))
        bins = model.config.image_size + 1
        coordinates = torch.tensor(labels, dtype=torch.long).reshape(-1)
        return F.cross_entropy(logits.reshape(-1, bins), coordinates)

    vocab = model.vocab
    sequences = [target_tokens(vocab, task_kind, label, label_space) + [vocab.end_id] for label in labels]
    length = min(max(len(s) for s in sequences), model.config.max_generation_length)
    targets = torch.full((len(sequences), length), vocab.pad_id, dtype=torch.long)
    for row, sequence in enumerate(sequences):
        sequence = sequence[:length]
        targets[row, :len(sequence)] = torch.tensor(sequence)
    prefix = torch.cat([torch.full((len(sequences), 1), vocab.bos_id, dtype=torch.long), targets[:, :-1]], dim=1)
    logits = model.decode_logits(hidden, memory_mask, prefix)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=vocab.pad_id)


@torch.no_grad()
def predict_batch(model, task_kind, label_space, images, texts):
    hidden, memory_mask, _ = model(images, texts)
    vocab = model.vocab
    predictions = []

    if model.structure == 'encoder_only':
        logits = model.task_heads[task_kind](hidden[:, 0])
        if task_kind == CLASSIFICATION:
            confidence, label = torch.softmax(logits, dim=-1).max(dim=-1)
            return [Prediction(kind=task_kind, confidence=float(c), label=int(l)) for c, l in zip(confidence, label)]
        bins = model.config.image_size + 1
        confidence, coordinates = torch.softmax(logits.reshape(-1, 4, bins), dim=-1).max(dim=-1)
        for row in range(coordinates.shape[0]):
            predictions.append(Prediction(
                kind=task_kind,
                confidence=float(confidence[row].mean()),
                box=_box(coordinates[row].tolist()),
            ))
        return predictions

    if task_kind == CLASSIFICATION:
        prefix = torch.full((hidden.shape[0], 1), vocab.bos_id, dtype=torch.long)
        logits = model.decode_logits(hidden, memory_mask, prefix)[:, 0, list(label_space)]
        confidence, label = torch.softmax(logits, dim=-1).max(dim=-1)
        return [Prediction(kind=task_kind, confidence=float(c), label=int(l)) for c, l in zip(confidence, label)]

    if task_kind == GROUNDING:
        outputs = model.generate(hidden, memory_mask, vocab.location_ids, steps=4, stop_at_end=False)
        for tokens, probs in outputs:
            predictions.append(Prediction(
                kind=task_kind,
                confidence=sum(probs) / len(probs),
                box=_box([vocab.coordinate(t) for t in tokens]),
            ))
        return predictions

    outputs = model.generate(hidden, memory_mask, tuple(label_space) + (vocab.end_id,))
    for tokens, probs in outputs:
        words = tuple(t for t in tokens if t != vocab.end_id)
        predictions.append(Prediction(kind=task_kind, confidence=sum(probs) / len(probs), tokens=words))
    return predictions


def label_to_prediction(task_kind, label):
    """Ground-truth label in Prediction form, for correctness checks"""
    if task_kind == CLASSIFICATION:
        return Prediction(kind=task_kind, confidence=1.0, label=int(label))
    if task_kind == SEQUENCE_GENERATION:
        return Prediction(kind=task_kind, confidence=1.0, tokens=tuple(label))
    return Prediction(kind=task_kind, confidence=1.0, box=tuple(label))


class FineTunedTask:
    """Fully fine-tuned copy of a pretrained model plus its task head (S)"""

    def __init__(self, model, task_kind, label_space):
        check_structure(model.structure, task_kind)
        self._model = model
        self.task_kind = task_kind
        self.label_space = tuple(label_space)
        self.heldout_metrics = {}

    @property
    def structure(self):
        return self._model.structure

    @property
    def vocab(self):
        return self._model.vocab

    @property
    def image_size(self):
        return self._model.config.image_size

    def predict(self, images, texts):
        return predict_batch(self._model, self.task_kind, self.label_space, images, texts)
