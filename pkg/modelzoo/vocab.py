# modelzoo/vocab.py
"""
Fixed toy vocabulary, whitespace tokenizer and token sequences
"""

import logging
from dataclasses import dataclass

import torch

from .exceptions import InputError


logger = logging.getLogger(__name__)


PAD, UNK, CLS, BOS, END = '<pad>', '<unk>', '<cls>', '<bos>', '<end>'
SPECIAL_TOKENS = (PAD, UNK, CLS, BOS, END)

COLORS = ('red', 'green', 'blue', 'yellow', 'cyan', 'magenta', 'white', 'orange')
SHAPES = ('square', 'circle', 'triangle', 'diamond')
POSITIONS = ('left', 'right', 'top', 'bottom', 'middle')

WORDS = COLORS + SHAPES + POSITIONS + (
    'what', 'which', 'where', 'is', 'the', 'a', 'this', 'of', 'in', 'on',
    'at', 'and', 'color', 'colour', 'hue', 'shade', 'tint', 'has', 'find',
    'locate', 'show', 'describe', 'point', 'to', 'picture', 'image', 'photo',
    'scene', 'canvas', 'object', 'shape', 'thing', 'item', 'figure', 'one',
    'there', 'see', 'can', 'you', 'please', 'me', 'small', 'big', 'drawn',
    'here', 'box', 'painted',
)

# Function words skipped by the word-importance probe
STOP_WORDS = frozenset({
    'is', 'the', 'a', 'this', 'of', 'in', 'on', 'at', 'and', 'to', 'there',
    'can', 'you', 'please', 'me', 'here',
})

VOCABULARY_ID = 'toy-64'


class Vocabulary:
    """
    Special tokens, then the 64 words, then one location token per pixel
    boundary (``<loc_0>`` .. ``<loc_{image_size}>``).
    """

    def __init__(self, image_size=32, words=WORDS):
        self.image_size = image_size
        self.words = tuple(words)
        self.location_tokens = tuple(f'<loc_{i}>' for i in range(image_size + 1))
        self.itos = list(SPECIAL_TOKENS) + list(self.words) + list(self.location_tokens)
        self.stoi = {token: idx for idx, token in enumerate(self.itos)}
        self.vocabulary_id = f'{VOCABULARY_ID}-loc{image_size}'

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def unk_id(self):
        return self.stoi[UNK]

    @property
    def bos_id(self):
        return self.stoi[BOS]

    @property
    def end_id(self):
        return self.stoi[END]

    @property
    def word_ids(self):
        start = len(SPECIAL_TOKENS)
        return tuple(range(start, start + len(self.words)))

    @property
    def location_ids(self):
        start = len(SPECIAL_TOKENS) + len(self.words)
        return tuple(range(start, start + len(self.location_tokens)))

    def is_word(self, token_id):
        first = len(SPECIAL_TOKENS)
        return first <= token_id < first + len(self.words)

    def location_id(self, coordinate):
        coordinate = int(min(max(coordinate, 0), self.image_size))
        return self.location_ids[coordinate]

    def coordinate(self, token_id):
        return token_id - self.location_ids[0]

    def encode(self, text):
        """Whitespace tokenization with unknown words mapped to <unk>"""
        words = tuple(text.lower().split())
        if not words:
            raise InputError('Cannot encode an empty text')
        tokens = tuple(self.stoi.get(word, self.unk_id) for word in words)
        return TokenSequence(tokens=tokens, words=words, vocabulary_id=self.vocabulary_id)

    def decode(self, token_ids):
        return ' '.join(self.itos[i] for i in token_ids)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    words: tuple
    vocabulary_id: str = VOCABULARY_ID

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise InputError('Token sequence must contain at least one token')
        if len(self.tokens) != len(self.words):
            raise InputError('Token and word counts differ')

    def __len__(self):
        return len(self.tokens)

    @property
    def text(self):
        return ' '.join(self.words)

    def replace(self, position, token_id, vocab):
        if not 0 <= position < len(self.tokens):
            raise InputError(f'Position {position} outside text of length {len(self.tokens)}')
        tokens = self.tokens[:position] + (token_id,) + self.tokens[position + 1:]
        words = self.words[:position] + (vocab.itos[token_id],) + self.words[position + 1:]
        return TokenSequence(tokens=tokens, words=words, vocabulary_id=self.vocabulary_id)

    def differing_positions(self, other):
        if len(other) != len(self):
            return list(range(max(len(self), len(other))))
        return [i for i, (a, b) in enumerate(zip(self.tokens, other.tokens)) if a != b]


def batch_tokens(sequences, max_length, pad_id):
    """
    Pad a list of TokenSequence into (ids, padding_mask) tensors.
    Texts longer than ``max_length`` are truncated with a warning.
    """
    ids = torch.full((len(sequences), max_length), pad_id, dtype=torch.long)
    for row, sequence in enumerate(sequences):
        if len(sequence.tokens) > max_length:
            logger.warning(
                f"Truncating '{sequence.text}' from {len(sequence.tokens)} to {max_length} tokens"
            )
        tokens = sequence.tokens[:max_length]
        ids[row, :len(tokens)] = torch.tensor(tokens, dtype=torch.long)
    return ids, ids.eq(pad_id)
