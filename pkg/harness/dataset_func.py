# harness/dataset_func.py
"""
Synthetic shapes data for the toy tasks

Every canvas holds 1-3 coloured shapes, each in its own slot (left, right,
top, bottom, middle), so position words and colour/shape pairs identify a
single object. Images are float arrays of shape (H, W, 3) in [0, 1].
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from modelzoo.checkpoint_func import read_container, write_container
from modelzoo.exceptions import ConfigurationError, InputError
from modelzoo.tasks import CLASSIFICATION, GROUNDING, SEQUENCE_GENERATION, TASK_KINDS
from modelzoo.vocab import COLORS, POSITIONS, SHAPES, Vocabulary


logger = logging.getLogger(__name__)

PRETRAINING = 'pretraining'

COLOR_RGB = {
    'red': (220, 40, 40),
    'green': (40, 180, 60),
    'blue': (40, 70, 220),
    'yellow': (235, 215, 40),
    'cyan': (40, 210, 215),
    'magenta': (210, 50, 200),
    'white': (245, 245, 245),
    'orange': (245, 140, 30),
}
BACKGROUND = (25, 25, 25)

TEMPLATES = {
    CLASSIFICATION: (
        'what color is the {shape}',
        'what is the color of the {shape}',
        'which color is the {shape} here',
    ),
    SEQUENCE_GENERATION: (
        'describe the {position} object',
        'what is the {position} shape',
        'describe the object on the {position}',
    ),
    GROUNDING: (
        'find the {color} {shape}',
        'locate the {color} {shape}',
        'point to the {color} {shape}',
    ),
}

# Caption form for each generation template, 2-4 tokens
CAPTION_FORMS = (
    ('{color}', '{shape}'),
    ('a', '{color}', '{shape}'),
    ('{color}', '{shape}', 'on', '{position}'),
)


def caption_for(vocab, target, form=CAPTION_FORMS[0]):
    words = (part.format(color=target.color, shape=target.shape, position=target.position) for part in form)
    return tuple(vocab.stoi[word] for word in words)


def slot_centres(image_size):
    """Centre of each position slot; slots are a quarter of the canvas apart"""
    quarter = image_size // 4
    half = image_size // 2
    return {
        'left': (quarter, half),
        'right': (image_size - quarter, half),
        'top': (half, quarter),
        'bottom': (half, image_size - quarter),
        'middle': (half, half),
    }


@dataclass(frozen=True)
class ShapeObject:
    color: str
    shape: str
    position: str
    box: tuple

    def to_dict(self):
        return {'color': self.color, 'shape': self.shape, 'position': self.position, 'box': list(self.box)}

    @classmethod
    def from_dict(cls, data):
        return cls(color=data['color'], shape=data['shape'], position=data['position'], box=tuple(data['box']))


@dataclass
class Sample:
    image: np.ndarray
    text: str
    label: object
    objects: list = field(default_factory=list)
    caption: tuple = ()

    def to_dict(self):
        label = list(self.label) if isinstance(self.label, tuple) else self.label
        return {
            'text': self.text,
            'label': label,
            'caption': list(self.caption),
            'objects': [obj.to_dict() for obj in self.objects],
        }


@dataclass
class ShapeDataset:
    task_kind: str
    seed: int
    samples: list
    image_size: int = 32

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    def label_counts(self):
        counts = {}
        for sample in self.samples:
            key = tuple(sample.label) if isinstance(sample.label, (list, tuple)) else sample.label
            counts[key] = counts.get(key, 0) + 1
        return counts


def draw_shape(draw, shape, box, rgb):
    x1, y1, x2, y2 = box
    # Pillow treats the second corner as inclusive
    right, lower = x2 - 1, y2 - 1
    if shape == 'square':
        draw.rectangle([x1, y1, right, lower], fill=rgb)
    elif shape == 'circle':
        draw.ellipse([x1, y1, right, lower], fill=rgb)
    elif shape == 'triangle':
        draw.polygon([((x1 + right) / 2, y1), (right, lower), (x1, lower)], fill=rgb)
    elif shape == 'diamond':
        cx, cy = (x1 + right) / 2, (y1 + lower) / 2
        draw.polygon([(cx, y1), (right, cy), (cx, lower), (x1, cy)], fill=rgb)
    else:
        raise InputError(f"Unknown shape '{shape}'")


def render_scene(objects, image_size=32):
    canvas = Image.new('RGB', (image_size, image_size), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    for obj in objects:
        draw_shape(draw, obj.shape, obj.box, COLOR_RGB[obj.color])
    return np.asarray(canvas, dtype=np.float64) / 255.0


def random_scene(rng, image_size=32, target_color=None):
    """
    1-3 objects with distinct shapes and distinct positions; the first
    object is the one templates ask about.
    """
    count = int(rng.integers(1, 4))
    shapes = rng.choice(len(SHAPES), size=count, replace=False)
    positions = rng.choice(len(POSITIONS), size=count, replace=False)
    centres = slot_centres(image_size)
    slot = image_size // 4
    objects = []
    for i in range(count):
        color = target_color if (i == 0 and target_color is not None) else COLORS[int(rng.integers(len(COLORS)))]
        size = int(rng.integers(max(slot - 2, 1), slot + 1))
        slack = (slot - size) // 2
        jitter_x, jitter_y = (int(rng.integers(-slack, slack + 1)) for _ in range(2))
        cx, cy = centres[POSITIONS[positions[i]]]
        x1 = cx - size // 2 + jitter_x
        y1 = cy - size // 2 + jitter_y
        objects.append(ShapeObject(
            color=color,
            shape=SHAPES[shapes[i]],
            position=POSITIONS[positions[i]],
            box=(x1, y1, x1 + size, y1 + size),
        ))
    return objects


def describe(objects):
    return ' '.join(f'{obj.color} {obj.shape} {obj.position}' for obj in objects)


def make_sample(task_kind, rng, vocab, image_size=32):
    target_color = COLORS[int(rng.integers(len(COLORS)))] if task_kind == CLASSIFICATION else None
    objects = random_scene(rng, image_size, target_color=target_color)
    target = objects[0]
    caption = caption_for(vocab, target)
    image = render_scene(objects, image_size)

    if task_kind == PRETRAINING:
        return Sample(image=image, text=describe(objects), label=None, objects=objects, caption=caption)

    templates = TEMPLATES[task_kind]
    choice = int(rng.integers(len(templates)))
    text = templates[choice].format(color=target.color, shape=target.shape, position=target.position)
    if task_kind == CLASSIFICATION:
        label = COLORS.index(target.color)
    elif task_kind == SEQUENCE_GENERATION:
        caption = caption_for(vocab, target, CAPTION_FORMS[choice])
        label = caption
    else:
        label = tuple(int(c) for c in target.box)
    return Sample(image=image, text=text, label=label, objects=objects, caption=caption)


def synthesize_dataset(task_kind, n, seed, image_size=32):
    """Deterministic ``n``-sample dataset for ``task_kind`` (or 'pretraining')"""
    if task_kind not in TASK_KINDS and task_kind != PRETRAINING:
        raise ConfigurationError(f"Unknown task kind '{task_kind}'")
    if n <= 0:
        raise ConfigurationError(f'Dataset size must be positive, got {n}')
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(image_size)
    samples = [make_sample(task_kind, rng, vocab, image_size) for _ in range(n)]
    logger.info('Synthesized %s %s samples (seed=%s)', n, task_kind, seed)
    return ShapeDataset(task_kind=task_kind, seed=seed, samples=samples, image_size=image_size)


def pretraining_corpus(n, seed, image_size=32):
    return synthesize_dataset(PRETRAINING, n, seed, image_size).samples


def save_dataset(dataset, path):
    """Images go to a container file, texts/labels/objects to a JSON manifest beside it"""
    path = Path(path)
    images = np.stack([sample.image for sample in dataset.samples])
    metadata = {
        'kind': 'dataset',
        'task_kind': dataset.task_kind,
        'seed': dataset.seed,
        'image_size': dataset.image_size,
        'count': len(dataset),
    }
    write_container(path, {'images': images}, metadata)
    manifest = path.with_suffix('.json')
    with open(manifest, 'w') as handle:
        json.dump({**metadata, 'samples': [sample.to_dict() for sample in dataset.samples]}, handle, indent=2)
    logger.info('Wrote %s samples to %s (+ %s)', len(dataset), path, manifest.name)
    return path, manifest


def load_dataset(path):
    path = Path(path)
    metadata, arrays = read_container(path)
    if metadata.get('kind') != 'dataset':
        raise InputError(f'{path} does not hold a dataset')
    with open(path.with_suffix('.json')) as handle:
        manifest = json.load(handle)
    samples = []
    for image, entry in zip(arrays['images'], manifest['samples']):
        label = tuple(entry['label']) if isinstance(entry['label'], list) else entry['label']
        samples.append(Sample(
            image=image,
            text=entry['text'],
            label=label,
            objects=[ShapeObject.from_dict(obj) for obj in entry['objects']],
            caption=tuple(entry['caption']),
        ))
    return ShapeDataset(
        task_kind=metadata['task_kind'],
        seed=metadata['seed'],
        samples=samples,
        image_size=metadata['image_size'],
    )
