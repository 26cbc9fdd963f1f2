# modelzoo/exceptions.py
"""
Exception hierarchy shared by every laboratory app
"""


class LabError(Exception):
    """Base class for laboratory errors"""


class ConfigurationError(LabError, ValueError):
    """Invalid model config, budget, plan or task/label combination"""


class InputError(LabError, ValueError):
    """Malformed input: out-of-vocabulary token, empty text, shape mismatch"""


class TrainingError(LabError):
    """Empty corpus or diverging loss"""


class AttackError(LabError):
    """Attack iteration failed; ``diagnostics`` describes the iterate"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConstraintViolation(AttackError):
    """A queried pair left the l-inf ball or the similarity gate"""


class EvaluationError(LabError):
    """Evaluation could not run or a trace broke its invariants"""
