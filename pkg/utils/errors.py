from typing import Optional


class ReflectError(Exception):
    """Base error; `exit_code` is what the CLI returns when this escapes a command."""

    exit_code: int = 1


class ConfigError(ReflectError):
    exit_code = 2


class CorpusError(ReflectError):
    exit_code = 2

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class NumericError(ReflectError, ValueError):
    """Invalid numeric input: NaN/Inf, shape mismatch, non-scalar loss and the like."""


class NonDeterministicError(ReflectError):
    pass


class UntrainedModelError(ReflectError):
    exit_code = 4


class TrainingDivergedError(ReflectError):
    exit_code = 3

    def __init__(self, message: str, last_good_state=None, step: int = 0):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.step = step


class CheckpointError(ReflectError):
    exit_code = 4
    code = "checkpoint"


class CheckpointFormatError(CheckpointError):
    code = "bad_magic"


class CheckpointVersionError(CheckpointError):
    code = "version_mismatch"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointHashError(CheckpointError):
    code = "config_hash_mismatch"


class VocabMismatchError(ReflectError):
    exit_code = 4
