"""
Exception hierarchy for the open-set scene toolkit.

Errors derived from InputError mean the caller handed us something unusable
(bad file, bad config, stale artifact) and map to exit code 2 in the CLI.
Everything else is an internal failure (exit code 1).
"""

from typing import Optional


class SceneSenseError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class InputError(SceneSenseError):
    """Problem with user-supplied input, config or artifacts"""
    exit_code = 2


# Audio and datasets
class UnsupportedFormat(InputError):
    """Audio file is not single-channel PCM WAV"""


class CorruptFile(InputError):
    """Audio or artifact file cannot be parsed"""


class EmptyClass(InputError):
    """A declared class has no examples"""


class EmptyDataset(InputError):
    """An operation received no examples"""


class InvalidInput(InputError):
    """Arguments are inconsistent with the operation's contract"""


class InvalidConfig(InputError):
    """Configuration value out of range or missing"""


class PipelineMismatch(InputError):
    """Artifact was produced under a different configuration"""


class MissingArtifact(InputError):
    """A required upstream artifact does not exist"""


class InvalidParameter(SceneSenseError):
    """Numeric parameter outside its valid domain"""


# Network core
class ShapeError(SceneSenseError):
    """Tensor shapes do not line up"""


class MissingConditioning(SceneSenseError):
    """A FiLM-conditioned model was run without a label vector"""


class NoCache(SceneSenseError):
    """backward() called without a preceding forward()"""


class NonFiniteGradient(SceneSenseError):
    """Gradient or parameter became NaN/inf during training"""


class RegimeViolation(InputError):
    """Training labels do not fit the classifier regime"""


# Open-set back-ends
class InvalidThreshold(InputError):
    """Softmax threshold outside (1/width, 1)"""


class DegenerateVector(SceneSenseError):
    """Cosine divergence requested against a zero vector"""


class DegenerateTail(SceneSenseError):
    """Weibull tail has no spread; carries the fallback fit"""

    def __init__(self, message: str, fallback: Optional[object] = None):
        super().__init__(message)
        self.fallback = fallback


class UnfittableClass(SceneSenseError):
    """Class has no correctly classified training examples"""


class NotFitted(SceneSenseError):
    """Model used before fitting"""


class UndefinedMetric(InvalidInput):
    """Metric is undefined for the given labels"""
