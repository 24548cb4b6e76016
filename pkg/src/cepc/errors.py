"""Exception hierarchy shared across the package.

Validation failures (bad shapes, malformed files, inconsistent configs) exit
the CLI with code 2; runtime failures during training exit with code 1.
"""


class CepcError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CepcError):
    """Caller-supplied inputs violated a documented precondition."""


class ShapeError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class DegenerateBatchError(ValidationError):
    pass


class TrainingError(CepcError):
    """Runtime failure inside a training loop (non-finite loss, bad state)."""


class StageError(CepcError):
    """Wraps an error with the pipeline stage it surfaced in."""

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"stage {stage}: {original}")
        self.stage = stage
        self.original = original
