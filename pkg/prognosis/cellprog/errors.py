"""
Exception hierarchy for the prognosis toolkit.

ValidationError subclasses are input/config problems (CLI exit code 1),
ComputationError subclasses are runtime failures (CLI exit code 2).
"""


class PrognosisError(Exception):
    """Root of every error raised by the toolkit"""


class ValidationError(PrognosisError, ValueError):
    """Bad input data, parameters or configuration"""


class ComputationError(PrognosisError):
    """A numerical step could not be carried out"""


# core
class EmptyStep(ValidationError):
    """A charge/discharge step with fewer than two usable samples"""


class DegenerateSpan(ValidationError):
    pass


# ingest
class MissingColumn(ValidationError):
    pass


class MalformedRow(ValidationError):
    pass


class VoltageOutOfWindow(ValidationError):
    pass


class UnparseableTimestamp(ValidationError):
    pass


class ConflictingDuplicate(ValidationError):
    pass


# ekf
class DimensionMismatch(ValidationError):
    pass


class SingularInnovation(ComputationError):
    pass


# nn
class ShapeMismatch(ValidationError):
    pass


class StaleCache(ComputationError):
    """Backward pass called with a cache from other parameters"""


class CheckpointFormatError(ValidationError):
    pass


# train
class EmptyTrainSet(ValidationError):
    pass


class TooFewCycles(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


# dca
class NonMonotoneVoltage(ValidationError):
    pass


class BadWindow(ValidationError):
    pass


# peaks
class CurveTooShort(ValidationError):
    pass


class NotAMaximum(ValidationError):
    pass


class CrossingNotFound(ComputationError):
    pass


# synth
class PeakOutOfWindow(ValidationError):
    pass


# cli
class NonFiniteValue(ValidationError):
    pass


class InvalidPath(ValidationError):
    """An input or output path failed validation"""

    def __init__(self, message: str, path: str = None):
        super().__init__(message)
        self.path = path
