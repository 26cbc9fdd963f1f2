# modelzoo/checkpoint_func.py
"""
Flat binary checkpoint container

Layout: b'VLCK' | header length (uint64, little-endian) | JSON header |
raw little-endian tensor bytes. The header lists name, shape, element type
and byte offset (relative to the data section) of every tensor, plus free
metadata (model config, seed, task kind ...).
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import InputError
from .models import Checkpoint
from .networks import ModelConfig, VisionLanguageModel
from .tasks import FineTunedTask, attach_task_head


logger = logging.getLogger(__name__)

MAGIC = b'VLCK'


def write_container(path, arrays, metadata):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    blobs = []
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        array = array.astype(array.dtype.newbyteorder('<'), copy=False)
        blob = array.tobytes()
        entries[name] = {
            'shape': list(array.shape),
            'dtype': array.dtype.str,
            'offset': offset,
            'nbytes': len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({'metadata': metadata, 'tensors': entries}, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(struct.pack('<Q', len(header)))
        handle.write(header)
        for blob in blobs:
            handle.write(blob)
    return path


def read_container(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f'{path} is not a checkpoint container')
    (header_length,) = struct.unpack('<Q', data[4:12])
    header = json.loads(data[12:12 + header_length].decode('utf-8'))
    body = memoryview(data)[12 + header_length:]
    arrays = {}
    for name, entry in header['tensors'].items():
        chunk = body[entry['offset']:entry['offset'] + entry['nbytes']]
        arrays[name] = np.frombuffer(chunk, dtype=np.dtype(entry['dtype'])).reshape(entry['shape']).copy()
    return header['metadata'], arrays


def _state_arrays(module):
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def _load_state(module, arrays):
    state = {name: torch.from_numpy(array) for name, array in arrays.items()}
    module.load_state_dict(state)


def save_pretrained(model, path, name='pretrained'):
    metadata = {
        'name': name,
        'kind': 'pretrained',
        'config': model.config.to_dict(),
        'seed': getattr(model, 'seed', None),
        'loss_history': list(model.loss_history),
    }
    logger.info('Saving pretrained checkpoint %s to %s', name, path)
    return write_container(path, _state_arrays(model), metadata)


def save_task(task, path, name='task'):
    model = task._model
    metadata = {
        'name': name,
        'kind': 'task',
        'config': model.config.to_dict(),
        'seed': getattr(model, 'seed', None),
        'task_kind': task.task_kind,
        'label_space': list(task.label_space),
        'heldout_metrics': task.heldout_metrics,
        'loss_history': list(model.loss_history),
    }
    logger.info('Saving %s task checkpoint %s to %s', task.task_kind, name, path)
    return write_container(path, _state_arrays(model), metadata)


def _model_from(metadata, arrays):
    config = ModelConfig.from_dict(metadata['config'])
    model = VisionLanguageModel(config).to(config.torch_dtype)
    model.seed = metadata.get('seed')
    model.loss_history = list(metadata.get('loss_history', []))
    return model


def load_pretrained(path):
    metadata, arrays = read_container(path)
    if metadata.get('kind') != 'pretrained':
        raise InputError(f'{path} does not hold a pretrained model')
    model = _model_from(metadata, arrays)
    _load_state(model, arrays)
    model.eval()
    return model


def load_task(path):
    metadata, arrays = read_container(path)
    if metadata.get('kind') != 'task':
        raise InputError(f'{path} does not hold a fine-tuned task')
    model = _model_from(metadata, arrays)
    attach_task_head(model, metadata['task_kind'], metadata['label_space'])
    _load_state(model, arrays)
    model.eval()
    task = FineTunedTask(model, metadata['task_kind'], metadata['label_space'])
    task.heldout_metrics = metadata.get('heldout_metrics', {})
    return task


def register_checkpoint(name, path, structure, seed, task_kind='', metrics=None):
    """Record a written checkpoint in the registry table"""
    checkpoint, _ = Checkpoint.objects.update_or_create(
        name=name,
        defaults={
            'path': str(path),
            'structure': structure,
            'task_kind': task_kind,
            'seed': seed,
            'metrics': metrics or {},
        },
    )
    return checkpoint
