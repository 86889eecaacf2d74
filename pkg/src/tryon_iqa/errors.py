"""Exception hierarchy. CLI exit codes hang off these classes."""


class IqaError(Exception):
    exit_code = 2
    kind = "error"


class UsageError(IqaError):
    exit_code = 1
    kind = "usage"


class ConfigError(UsageError):
    kind = "config"


class DataError(IqaError):
    exit_code = 2
    kind = "data"


class ParseError(DataError):
    """Malformed input; ``location`` is ``path:line`` or similar."""

    kind = "parse"

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class CheckpointError(DataError):
    kind = "checkpoint"


class TruncatedCheckpointError(CheckpointError):
    kind = "checkpoint-truncated"


class BadMagicError(CheckpointError):
    kind = "checkpoint-magic"


class ChecksumError(CheckpointError):
    kind = "checkpoint-crc"


class ShapeMismatchError(CheckpointError):
    kind = "checkpoint-shape"


class NumericError(IqaError):
    exit_code = 3
    kind = "numeric"


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""
