# text_attack/substitution_func.py
"""
Word-substitution attack with a sentence-similarity gate

Two stages, in the manner of masked-LM substitution attacks:
1. rank content words by how much masking them with <unk> hurts the
   black-box prediction (one probe query per word)
2. walk positions in that order, try the k nearest words of the frozen
   embedding table, keep candidates whose sentence similarity stays above
   sigma_s and query S with the clean image
"""

import logging
from dataclasses import dataclass, field

import torch

from blackbox.query_func import STAGE_TEXT
from modelzoo.exceptions import InputError
from modelzoo.networks import SentenceEncoder
from modelzoo.vocab import STOP_WORDS


logger = logging.getLogger(__name__)

SUCCESS = 'success'
EXHAUSTED = 'exhausted'


class SubstitutionSpace:
    """Public side of the pretrained model the text attack may use: vocabulary and word table"""

    def __init__(self, vocab, word_table):
        self.vocab = vocab
        self.table = word_table.detach().clone()
        self.encoder = SentenceEncoder(self.table)
        word_ids = torch.tensor(vocab.word_ids, dtype=torch.long)
        words = self.table[word_ids]
        self._word_ids = word_ids
        self._unit_words = words / words.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    @classmethod
    def from_model(cls, model):
        return cls(model.vocab, model.word_encoder.weight)

    def similarity(self, a, b):
        return self.encoder.similarity(a, b)

    def neighbours(self, token_id, k):
        """Up to k nearest word ids by embedding cosine; ties go to the lower id"""
        if k <= 0:
            return []
        query = self.table[token_id]
        query = query / query.norm().clamp_min(1e-12)
        scores = (self._unit_words @ query).tolist()
        ranked = sorted(
            (
                (-score, int(candidate))
                for score, candidate in zip(scores, self._word_ids.tolist())
                if candidate != token_id
            ),
        )
        return [candidate for _, candidate in ranked[:k]]


@dataclass(frozen=True)
class TextCandidate:
    text: object
    similarity: float
    substituted_position: int
    original_word: int
    new_word: int

    def sort_key(self):
        return (-self.similarity, self.substituted_position, self.new_word)

    def to_dict(self):
        return {
            'text': self.text.text,
            'tokens': list(self.text.tokens),
            'similarity': self.similarity,
            'substituted_position': self.substituted_position,
            'original_word': self.original_word,
            'new_word': self.new_word,
        }


class CandidateList:
    """Gate-passing text perturbations in the order they were tested"""

    def __init__(self, entries=None):
        self.entries = list(entries or [])

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, index):
        return self.entries[index]

    def add(self, candidate):
        self.entries.append(candidate)

    def ranked(self):
        """Similarity descending, then earlier position, then lower new word id"""
        return CandidateList(sorted(self.entries, key=TextCandidate.sort_key))

    def to_dicts(self):
        return [entry.to_dict() for entry in self.entries]


@dataclass
class TextAttackOutcome:
    status: str
    candidates: CandidateList
    adversarial_text: object = None
    order: list = field(default_factory=list)
    importance: dict = field(default_factory=dict)
    candidate_queries: int = 0
    importance_queries: int = 0
    rejected: int = 0

    @property
    def success(self):
        return self.status == SUCCESS


def content_positions(text, vocab):
    positions = [i for i, word in enumerate(text.words) if word not in STOP_WORDS]
    return positions or list(range(len(text)))


def importance_score(original, probed, flipped):
    """Confidence drop; a flipped label always outranks an unflipped one"""
    if flipped:
        return original.confidence + probed.confidence
    return original.confidence - probed.confidence


def rank_word_importance(handle, image, text, vocab):
    """
    Content-word positions by descending confidence drop when the word is
    replaced with <unk>. Returns (ordered positions, {position: score}).
    """
    if len(text) < 1:
        raise InputError('Cannot rank an empty text')
    original = handle.original_prediction
    scores = {}
    for position in content_positions(text, vocab):
        masked = text.replace(position, vocab.unk_id, vocab)
        probed = handle.probe(image, masked)
        scores[position] = importance_score(original, probed, handle.is_adversarial(probed))
    order = sorted(scores, key=lambda position: (-scores[position], position))
    logger.debug('word importance %s', [(p, text.words[p], round(scores[p], 4)) for p in order])
    return order, scores


def generate_substitutions(space, text, position, k):
    if not 0 <= position < len(text):
        raise InputError(f'Position {position} outside text of length {len(text)}')
    return space.neighbours(text.tokens[position], k)


def semantic_similarity(space, text, perturbed):
    if len(text) < 1 or len(perturbed) < 1:
        raise InputError('Similarity needs two non-empty texts')
    return space.similarity(text, perturbed)


def text_attack(handle, image, text, budget, space, k):
    """
    Stops at the first gate-passing candidate that changes S's prediction
    on the clean image (SUCCESS); otherwise returns every stored candidate
    (EXHAUSTED).
    """
    vocab = space.vocab
    order, scores = rank_word_importance(handle, image, text, vocab)
    outcome = TextAttackOutcome(
        status=EXHAUSTED,
        candidates=CandidateList(),
        order=order,
        importance=scores,
        importance_queries=len(scores),
    )
    for position in order:
        for new_word in generate_substitutions(space, text, position, k):
            perturbed = text.replace(position, new_word, vocab)
            similarity = semantic_similarity(space, text, perturbed)
            if not similarity > budget.sigma_s:
                outcome.rejected += 1
                continue
            candidate = TextCandidate(
                text=perturbed,
                similarity=similarity,
                substituted_position=position,
                original_word=text.tokens[position],
                new_word=new_word,
            )
            outcome.candidates.add(candidate)
            prediction = handle.query(image, perturbed, stage=STAGE_TEXT)
            outcome.candidate_queries += 1
            logger.debug('text candidate "%s" gamma=%.4f', perturbed.text, similarity)
            if handle.is_adversarial(prediction):
                outcome.status = SUCCESS
                outcome.adversarial_text = perturbed
                logger.info('Text attack succeeded with "%s" after %s candidates',
                            perturbed.text, outcome.candidate_queries)
                return outcome
    return outcome
