# bsa/budget.py

from dataclasses import dataclass, asdict, replace

from django.conf import settings

from modelzoo.exceptions import ConfigurationError
from modelzoo.tasks import GROUNDING


OPTIMIZERS = ('pgd', 'mi')


@dataclass(frozen=True)
class AttackBudget:
    """
    Perturbation and iteration budget of one attack.

    sigma_i is the l-inf radius in [0, 1] pixel units, sigma_s the minimum
    sentence similarity a perturbed text keeps, steps / init_steps the total
    (N) and single-modal (N_s) image iterations.
    A sigma_s above 1 is accepted and makes the text gate impossible.
    """
    sigma_i: float = 16 / 255
    sigma_s: float = 0.95
    steps: int = 40
    init_steps: int = 20
    step_size: float = 0.01
    max_modified_words: int = 1
    optimizer: str = 'pgd'
    momentum_decay: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.init_steps <= self.steps:
            raise ConfigurationError(f'Need 0 < init_steps <= steps, got {self.init_steps}/{self.steps}')
        if not 0 <= self.sigma_i < 1:
            raise ConfigurationError(f'sigma_i must lie in [0, 1), got {self.sigma_i}')
        if not self.sigma_s > 0:
            raise ConfigurationError(f'sigma_s must be positive, got {self.sigma_s}')
        if self.step_size < 0:
            raise ConfigurationError(f'step_size must be non-negative, got {self.step_size}')
        if self.max_modified_words < 1:
            raise ConfigurationError('max_modified_words must be at least 1')
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if self.momentum_decay < 0:
            raise ConfigurationError('momentum_decay must be non-negative')
        return self

    @property
    def multimodal_steps(self):
        return self.steps - self.init_steps

    def with_changes(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_settings(cls, task_kind=None, **overrides):
        """Defaults from settings.VLATTACK; grounding tasks use the smaller radius"""
        conf = settings.VLATTACK
        values = {
            'sigma_i': conf['SIGMA_I_GROUNDING'] if task_kind == GROUNDING else conf['SIGMA_I'],
            'sigma_s': conf['SIGMA_S'],
            'steps': conf['STEPS'],
            'init_steps': conf['INIT_STEPS'],
            'step_size': conf['STEP_SIZE'],
            'max_modified_words': conf['MAX_MODIFIED_WORDS'],
            'momentum_decay': conf['MOMENTUM_DECAY'],
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)
