# modelzoo/training_func.py
"""
Pre-training and full fine-tuning of the toy models
"""

import copy
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from django.conf import settings

from blackbox.query_func import iou, is_adversarial

from .exceptions import TrainingError
from .tasks import (
    GROUNDING, FineTunedTask, attach_task_head, check_structure, default_label_space,
    label_to_prediction, task_loss, validate_labels,
)


logger = logging.getLogger(__name__)


def _recipe(name, recipe):
    merged = dict(settings.VLATTACK[name])
    merged.update(recipe or {})
    return merged


def _stack_images(model, samples):
    return torch.as_tensor(np.stack([s.image for s in samples]), dtype=model.dtype)


def _check_finite(loss, epoch, step):
    if not math.isfinite(float(loss)):
        raise TrainingError(f'Loss became non-finite at epoch {epoch}, step {step}: {float(loss)}')


def _shifted_negatives(texts, index, generator):
    count = len(texts)
    shift = int(torch.randint(1, max(count, 2), (1,), generator=generator)) if count > 1 else 0
    return [texts[(i + shift) % count] for i in index]


def _matching_loss(model, images, texts, negatives):
    """Image-text matching on matched/mismatched pairs; also returns the encoder outputs"""
    batch = images.shape[0]
    both_images = torch.cat([images, images], dim=0)
    hidden, memory_mask, _ = model(both_images, texts + negatives)
    itm_labels = torch.cat([torch.ones(batch, dtype=torch.long), torch.zeros(batch, dtype=torch.long)])
    return F.cross_entropy(model.head(hidden[:, 0]), itm_labels), hidden, memory_mask


def _pretrain_loss(model, images, texts, negatives, caption_targets):
    """Image-text matching, plus captioning for encoder-decoder"""
    batch = images.shape[0]
    loss, hidden, memory_mask = _matching_loss(model, images, texts, negatives)

    if model.decoder is not None:
        vocab = model.vocab
        sequences = [list(target) + [vocab.end_id] for target in caption_targets]
        length = min(max(len(s) for s in sequences), model.config.max_generation_length)
        targets = torch.full((batch, length), vocab.pad_id, dtype=torch.long)
        for row, sequence in enumerate(sequences):
            sequence = sequence[:length]
            targets[row, :len(sequence)] = torch.tensor(sequence)
        prefix = torch.cat([torch.full((batch, 1), vocab.bos_id, dtype=torch.long), targets[:, :-1]], dim=1)
        logits = model.decode_logits(hidden[:batch], memory_mask[:batch], prefix)
        loss = loss + F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=vocab.pad_id
        )
    return loss


def pretrain(model, corpus, recipe=None, seed=0):
    """
    Train F on paired image-text data. ``corpus`` items expose ``image``,
    ``text`` and ``caption`` (word ids of the short description).
    Per-epoch mean losses are appended to ``model.loss_history``.
    """
    if not corpus:
        raise TrainingError('Pre-training corpus is empty')
    recipe = _recipe('PRETRAIN', recipe)
    vocab = model.vocab
    texts = [vocab.encode(item.text) for item in corpus]
    captions = [tuple(item.caption) for item in corpus]
    images = _stack_images(model, corpus)
    count = len(corpus)

    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.AdamW(
        [p for name, p in model.named_parameters() if not name.startswith('task_heads')],
        lr=recipe['lr'],
        weight_decay=recipe['weight_decay'],
    )
    batch_size = recipe['batch_size']

    logger.info('Pre-training %s model on %s pairs for %s epochs', model.structure, count, recipe['epochs'])
    model.train()
    for epoch in range(recipe['epochs']):
        order = torch.randperm(count, generator=generator)
        total, steps = 0.0, 0
        for step, start in enumerate(range(0, count, batch_size)):
            index = order[start:start + batch_size].tolist()
            loss = _pretrain_loss(
                model,
                images[index],
                [texts[i] for i in index],
                _shifted_negatives(texts, index, generator),
                [captions[i] for i in index],
            )
            _check_finite(loss, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss)
            steps += 1
        mean_loss = total / steps
        model.loss_history.append(mean_loss)
        logger.info('pretrain epoch %s/%s loss=%.4f', epoch + 1, recipe['epochs'], mean_loss)
    model.eval()
    return model


def fine_tune(model, task_data, task_kind, recipe=None, seed=0, heldout=None):
    """
    Fully fine-tune a copy of ``model`` and wrap it as a FineTunedTask.
    Every parameter block is trained: the task objective plus the
    image-text matching objective scaled by ``recipe['matching_weight']``,
    which keeps the matching head in the update. The pretrained model is
    left untouched.
    """
    check_structure(model.structure, task_kind)
    if not task_data:
        raise TrainingError('Fine-tuning data is empty')
    recipe = _recipe('FINETUNE', recipe)
    label_space = default_label_space(model.vocab, task_kind)
    labels = [sample.label for sample in task_data]
    validate_labels(task_kind, labels, label_space, model.config.image_size)

    task_model = copy.deepcopy(model)
    task_model.loss_history = []
    attach_task_head(task_model, task_kind, label_space)

    vocab = task_model.vocab
    texts = [vocab.encode(sample.text) for sample in task_data]
    images = _stack_images(task_model, task_data)
    count = len(task_data)

    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.AdamW(
        task_model.parameters(),
        lr=recipe['lr'],
        weight_decay=recipe['weight_decay'],
    )
    batch_size = recipe['batch_size']
    matching_weight = recipe['matching_weight']
    if matching_weight <= 0:
        raise TrainingError(f'matching_weight must be positive, got {matching_weight}')

    logger.info('Fine-tuning %s model for %s on %s samples', task_model.structure, task_kind, count)
    task_model.train()
    for epoch in range(recipe['epochs']):
        order = torch.randperm(count, generator=generator)
        total, steps = 0.0, 0
        for step, start in enumerate(range(0, count, batch_size)):
            index = order[start:start + batch_size].tolist()
            batch_texts = [texts[i] for i in index]
            loss = task_loss(
                task_model, task_kind, label_space,
                images[index], batch_texts, [labels[i] for i in index],
            )
            matching, _, _ = _matching_loss(
                task_model, images[index], batch_texts, _shifted_negatives(texts, index, generator)
            )
            loss = loss + matching_weight * matching
            _check_finite(loss, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss)
            steps += 1
        mean_loss = total / steps
        task_model.loss_history.append(mean_loss)
        logger.info('fine-tune epoch %s/%s loss=%.4f', epoch + 1, recipe['epochs'], mean_loss)
    task_model.eval()

    task = FineTunedTask(task_model, task_kind, label_space)
    if heldout:
        task.heldout_metrics = evaluate_task(task, heldout)
        logger.info('Held-out metrics for %s: %s', task_kind, task.heldout_metrics)
    return task


def evaluate_task(task, samples, batch_size=128):
    """
    Held-out quality of S: accuracy for every kind (IoU > 0.5 for grounding)
    plus mean IoU for grounding.
    """
    vocab = task.vocab
    correct = 0
    ious = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        predictions = task.predict(images, [vocab.encode(s.text) for s in chunk])
        for sample, prediction in zip(chunk, predictions):
            truth = label_to_prediction(task.task_kind, sample.label)
            if not is_adversarial(prediction, truth, task.task_kind):
                correct += 1
            if task.task_kind == GROUNDING:
                ious.append(iou(prediction.box, truth.box))
    metrics = {'accuracy': correct / len(samples)}
    if task.task_kind == GROUNDING:
        metrics['mean_iou'] = float(np.mean(ious))
    return metrics
