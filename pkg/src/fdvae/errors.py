"""Exception hierarchy.

Every error raised by the package derives from one of three families, which
the CLI maps to exit codes: ``ConfigError`` (2), ``DataError`` (3) and
``TrainingError`` (4).
"""


class FDVAEError(Exception):
    exit_code = 1


class ConfigError(FDVAEError, ValueError):
    exit_code = 2


class DataError(FDVAEError, ValueError):
    exit_code = 3


class TrainingError(FDVAEError, RuntimeError):
    exit_code = 4


# configuration / specification
class InvalidSpec(ConfigError):
    pass


class InconsistentConfig(ConfigError):
    pass


class BatchTooSmall(ConfigError):
    pass


# data ingestion and evaluation inputs
class InsufficientRecords(DataError):
    pass


class MissingLabel(DataError):
    pass


class UnknownAttribute(DataError):
    pass


class CorruptAnnotation(DataError):
    pass


class MissingImageFile(DataError):
    pass


class EmptyDataset(DataError):
    pass


class DataExhausted(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NonBinaryValue(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class UndefinedRate(DataError):
    pass


class DegenerateColumn(DataError):
    pass


class EmptyRows(DataError):
    pass


class MissingMetricsFile(DataError):
    pass


# model execution and optimization
class ShapeMismatch(TrainingError, ValueError):
    pass


class NonFiniteComponent(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class IncompatibleCheckpoint(TrainingError):
    pass
