"""Exception taxonomy shared across the package.

The CLI maps ``SqeError`` (and ``ValueError``/``OSError``) to exit code 1
and anything else to exit code 2, so raise the most specific class here
rather than a bare ``Exception``.
"""


class SqeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SqeError):
    """A binary container (WAV, embedding file, checkpoint) is malformed."""


class UnsupportedEncodingError(FormatError):
    """The container is valid but uses a codec this package does not read."""


class TruncationError(FormatError):
    """Declared payload size does not match the bytes actually present."""


class VersionError(FormatError):
    """File format version is not supported."""


class IntegrityError(FormatError):
    """Contents are internally inconsistent (e.g. tensor shape vs. config)."""


class DataError(SqeError):
    """Payload values violate an invariant (NaN/Inf, empty audio)."""


class SchemaError(SqeError):
    """A tabular input does not have the required columns."""


class ManifestRowError(SqeError):
    """A manifest row failed to parse; carries the 1-based file line."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TooShortError(SqeError):
    """Input signal is shorter than one analysis window."""


class ShapeError(SqeError):
    """Operands have incompatible shapes; names the op and both shapes."""


class GraphError(SqeError):
    """Autodiff graph contract violation (e.g. non-scalar loss)."""


class DegenerateInputError(SqeError):
    """Metric input has zero variance or too few distinct values."""


class TaskSetMismatchError(SqeError):
    """A checkpoint does not cover the tasks requested by the caller."""


class EmptySupervisionError(SqeError):
    """Every task label is absent for every sample in a batch."""


class TrainingDivergedError(SqeError):
    """Loss became non-finite; carries the epoch and batch index."""

    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch_index}"
        )
        self.epoch = epoch
        self.batch_index = batch_index


class CostModelError(SqeError):
    """The FLOP cost model has no formula for a layer kind."""
