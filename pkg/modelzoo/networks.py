# modelzoo/networks.py
"""
Toy vision-language networks

Two structures share one backbone:
- encoder_only: patch image encoder + multimodal Transformer encoder, task
  heads read the class token
- encoder_decoder: same encoder plus an autoregressive decoder that emits
  word or location tokens until <end>

Both expose a FeatureStack of per-block outputs for the block-wise attack.
"""

import logging
from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn

from .exceptions import ConfigurationError, InputError
from .vocab import SPECIAL_TOKENS, Vocabulary, batch_tokens


logger = logging.getLogger(__name__)

STRUCTURES = ('encoder_only', 'encoder_decoder')


@dataclass
class ModelConfig:
    structure: str = 'encoder_only'
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    image_blocks: int = 2
    fusion_blocks: int = 2
    decoder_blocks: int = 2
    vocab_size: int = 0
    max_text_length: int = 12
    max_generation_length: int = 6
    dtype: str = 'float64'

    def __post_init__(self):
        if not self.vocab_size:
            self.vocab_size = len(Vocabulary(self.image_size))

    @classmethod
    def from_dict(cls, data):
        known = {name for name in cls.__dataclass_fields__}
        return cls(**{key: value for key, value in data.items() if key in known})

    def to_dict(self):
        return asdict(self)

    @property
    def patch_count(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def validate(self):
        if self.structure not in STRUCTURES:
            raise ConfigurationError(f"Unknown structure '{self.structure}', expected one of {STRUCTURES}")
        if self.image_blocks < 1 or self.fusion_blocks < 1:
            raise ConfigurationError('Image and fusion encoders need at least one block each')
        if self.structure == 'encoder_decoder' and self.decoder_blocks < 1:
            raise ConfigurationError('encoder_decoder needs at least one decoder block')
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigurationError(
                f'Vocabulary size {self.vocab_size} below special-token count {len(SPECIAL_TOKENS)}'
            )
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError('image_size must be a multiple of patch_size')
        if self.width % self.heads:
            raise ConfigurationError('width must be divisible by heads')
        if self.dtype not in ('float32', 'float64'):
            raise ConfigurationError(f"Unsupported dtype '{self.dtype}'")
        return self


@dataclass
class FeatureStack:
    """
    Per-block features. ``image_blocks[i]`` has shape (B, M_j, D) with one
    vector per patch; ``fusion_blocks[k]`` has shape (B, P, D) and keeps only
    the image-token positions of the multimodal encoder.
    """
    image_blocks: list = field(default_factory=list)
    fusion_blocks: list = field(default_factory=list)

    def detach(self):
        return FeatureStack(
            image_blocks=[block.detach() for block in self.image_blocks],
            fusion_blocks=[block.detach() for block in self.fusion_blocks],
        )

    def shapes(self):
        return (
            [tuple(block.shape) for block in self.image_blocks],
            [tuple(block.shape) for block in self.fusion_blocks],
        )

    @property
    def vector_count(self):
        blocks = self.image_blocks + self.fusion_blocks
        return sum(block.shape[0] * block.shape[1] for block in blocks)


def _encoder_layer(config):
    return nn.TransformerEncoderLayer(
        d_model=config.width,
        nhead=config.heads,
        dim_feedforward=config.width * config.mlp_ratio,
        dropout=0.0,
        activation='gelu',
        batch_first=True,
        norm_first=True,
    )


class ImageEncoder(nn.Module):
    """Patch embedding followed by Transformer blocks"""

    def __init__(self, config):
        super().__init__()
        self.patch_size = config.patch_size
        self.patch_embed = nn.Linear(config.patch_size ** 2 * config.channels, config.width)
        self.position = nn.Parameter(torch.randn(1, config.patch_count, config.width) * 0.02)
        self.blocks = nn.ModuleList([_encoder_layer(config) for _ in range(config.image_blocks)])

    def patchify(self, images):
        batch, height, width, channels = images.shape
        p = self.patch_size
        patches = images.reshape(batch, height // p, p, width // p, p, channels)
        return patches.permute(0, 1, 3, 2, 4, 5).reshape(batch, -1, p * p * channels)

    def forward(self, images):
        hidden = self.patch_embed(self.patchify(images)) + self.position
        block_outputs = []
        for block in self.blocks:
            hidden = block(hidden)
            block_outputs.append(hidden)
        return hidden, block_outputs


class MultimodalEncoder(nn.Module):
    """
    Transformer over [cls | image tokens | text tokens].
    Block features are the post-block outputs at the image positions.
    """

    def __init__(self, config):
        super().__init__()
        self.patch_count = config.patch_count
        self.cls_token = nn.Parameter(torch.randn(1, 1, config.width) * 0.02)
        self.text_position = nn.Parameter(torch.randn(1, config.max_text_length, config.width) * 0.02)
        self.modality = nn.Embedding(2, config.width)
        self.blocks = nn.ModuleList([_encoder_layer(config) for _ in range(config.fusion_blocks)])
        self.norm = nn.LayerNorm(config.width)

    def forward(self, image_tokens, text_embeddings, text_padding_mask):
        batch = image_tokens.shape[0]
        length = text_embeddings.shape[1]
        image_part = image_tokens + self.modality.weight[0]
        text_part = text_embeddings + self.text_position[:, :length] + self.modality.weight[1]
        hidden = torch.cat([self.cls_token.expand(batch, -1, -1), image_part, text_part], dim=1)
        prefix_mask = torch.zeros(batch, 1 + self.patch_count, dtype=torch.bool, device=hidden.device)
        padding_mask = torch.cat([prefix_mask, text_padding_mask], dim=1)
        block_outputs = []
        for block in self.blocks:
            hidden = block(hidden, src_key_padding_mask=padding_mask)
            block_outputs.append(hidden[:, 1:1 + self.patch_count])
        return self.norm(hidden), padding_mask, block_outputs


class AnswerDecoder(nn.Module):
    """Autoregressive decoder over the multimodal memory"""

    def __init__(self, config):
        super().__init__()
        self.position = nn.Parameter(torch.randn(1, config.max_generation_length + 1, config.width) * 0.02)
        self.blocks = nn.ModuleList([
            nn.TransformerDecoderLayer(
                d_model=config.width,
                nhead=config.heads,
                dim_feedforward=config.width * config.mlp_ratio,
                dropout=0.0,
                activation='gelu',
                batch_first=True,
                norm_first=True,
            )
            for _ in range(config.decoder_blocks)
        ])
        self.norm = nn.LayerNorm(config.width)
        self.lm_head = nn.Linear(config.width, config.vocab_size)

    def forward(self, prefix_embeddings, memory, memory_padding_mask):
        length = prefix_embeddings.shape[1]
        hidden = prefix_embeddings + self.position[:, :length]
        causal = nn.Transformer.generate_square_subsequent_mask(length, dtype=hidden.dtype, device=hidden.device)
        for block in self.blocks:
            hidden = block(
                hidden,
                memory,
                tgt_mask=causal,
                tgt_is_causal=True,
                memory_key_padding_mask=memory_padding_mask,
            )
        return self.lm_head(self.norm(hidden))


class VisionLanguageModel(nn.Module):
    """
    White-box pretrained model F. ``head`` is the image-text matching head
    used only during pre-training; fine-tuning adds entries to ``task_heads``.
    """

    def __init__(self, config, vocab=None):
        super().__init__()
        self.config = config.validate()
        self.vocab = vocab or Vocabulary(config.image_size)
        self.image_encoder = ImageEncoder(config)
        self.word_encoder = nn.Embedding(config.vocab_size, config.width)
        self.multimodal_encoder = MultimodalEncoder(config)
        self.head = nn.Linear(config.width, 2)
        self.decoder = AnswerDecoder(config) if config.structure == 'encoder_decoder' else None
        self.task_heads = nn.ModuleDict()
        self.loss_history = []

    @property
    def structure(self):
        return self.config.structure

    @property
    def dtype(self):
        return self.config.torch_dtype

    def prepare_images(self, images):
        images = torch.as_tensor(images, dtype=self.dtype)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        expected = (self.config.image_size, self.config.image_size, self.config.channels)
        if tuple(images.shape[1:]) != expected:
            raise InputError(f'Image shape {tuple(images.shape[1:])} does not match {expected}')
        return images

    def prepare_texts(self, texts):
        if not isinstance(texts, (list, tuple)):
            texts = [texts]
        for sequence in texts:
            for token in sequence.tokens:
                if not 0 <= token < self.config.vocab_size:
                    raise InputError(f'Token id {token} outside vocabulary of size {self.config.vocab_size}')
        return batch_tokens(texts, self.config.max_text_length, self.vocab.pad_id)

    def encode(self, images, token_ids, padding_mask):
        image_tokens, image_features = self.image_encoder(images)
        text_embeddings = self.word_encoder(token_ids)
        hidden, memory_mask, fusion_features = self.multimodal_encoder(image_tokens, text_embeddings, padding_mask)
        return hidden, memory_mask, FeatureStack(image_blocks=image_features, fusion_blocks=fusion_features)

    def forward(self, images, texts):
        """Returns (hidden states, memory padding mask, FeatureStack)"""
        images = self.prepare_images(images)
        token_ids, padding_mask = self.prepare_texts(texts)
        if token_ids.shape[0] != images.shape[0]:
            token_ids = token_ids.expand(images.shape[0], -1)
            padding_mask = padding_mask.expand(images.shape[0], -1)
        return self.encode(images, token_ids, padding_mask)

    def decode_logits(self, hidden, memory_mask, prefix_ids):
        if self.decoder is None:
            raise ConfigurationError('encoder_only models have no decoder')
        return self.decoder(self.word_encoder(prefix_ids), hidden, memory_mask)

    @torch.no_grad()
    def generate(self, hidden, memory_mask, allowed_ids, steps=None, stop_at_end=True):
        """
        Greedy decoding restricted to ``allowed_ids``. Stops at <end> or after
        ``steps`` tokens (default: max_generation_length). Returns per-row
        (token list, probability list).
        """
        steps = steps or self.config.max_generation_length
        batch = hidden.shape[0]
        allowed = torch.full((self.config.vocab_size,), float('-inf'), dtype=hidden.dtype)
        allowed[list(allowed_ids)] = 0.0
        prefix = torch.full((batch, 1), self.vocab.bos_id, dtype=torch.long)
        finished = torch.zeros(batch, dtype=torch.bool)
        outputs = [([], []) for _ in range(batch)]
        for _ in range(steps):
            logits = self.decode_logits(hidden, memory_mask, prefix)[:, -1] + allowed
            probs = torch.softmax(logits, dim=-1)
            confidence, token = probs.max(dim=-1)
            for row in range(batch):
                if finished[row]:
                    continue
                outputs[row][0].append(int(token[row]))
                outputs[row][1].append(float(confidence[row]))
                if stop_at_end and int(token[row]) == self.vocab.end_id:
                    finished[row] = True
            prefix = torch.cat([prefix, token.unsqueeze(1)], dim=1)
            if bool(finished.all()):
                break
        return outputs


def build_pretrained(config, seed):
    """
    Deterministic model for a given (config, seed). The global RNG state is
    restored afterwards.
    """
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VisionLanguageModel(config)
    model.to(config.torch_dtype)
    model.seed = seed
    model.eval()
    logger.info('Built %s model (seed=%s, %s image blocks, %s fusion blocks)',
                config.structure, seed, config.image_blocks, config.fusion_blocks)
    return model


def forward_with_features(model, image, text):
    """FeatureStack of (image, text); differentiable w.r.t. ``image``"""
    _, _, features = model(image, [text])
    return features


class SentenceEncoder:
    """
    Mean-pooled frozen word embeddings, L2-normalized. Holds its own copy of
    the embedding table so later training cannot move it.
    """

    def __init__(self, word_table):
        self.table = word_table.detach().clone()

    @classmethod
    def from_model(cls, model):
        return cls(model.word_encoder.weight)

    def encode(self, text):
        tokens = text.tokens if hasattr(text, 'tokens') else tuple(text)
        if not tokens:
            raise InputError('Cannot encode an empty sentence')
        if max(tokens) >= self.table.shape[0] or min(tokens) < 0:
            raise InputError('Token id outside the embedding table')
        pooled = self.table[list(tokens)].mean(dim=0)
        norm = pooled.norm()
        if float(norm) < 1e-12:
            return torch.zeros_like(pooled)
        return pooled / norm

    def similarity(self, a, b):
        return float(torch.dot(self.encode(a), self.encode(b)))


def encode_sentence(model, text):
    return SentenceEncoder.from_model(model).encode(text)
