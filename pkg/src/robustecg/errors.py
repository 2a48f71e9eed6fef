"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
bad or missing data (3) and numeric failures (4).
"""


class RobustEcgError(Exception):
    exit_code = 1


class ConfigError(RobustEcgError, ValueError):
    exit_code = 2


class DataError(RobustEcgError, ValueError):
    exit_code = 3


class NumericError(RobustEcgError, ArithmeticError):
    exit_code = 4


# signal io
class MissingFile(DataError, FileNotFoundError):
    pass


class ShapeMismatch(DataError):
    pass


class InvalidSamples(DataError):
    pass


class InvalidRate(ConfigError):
    pass


class InvalidBand(ConfigError):
    pass


class EmptyInput(DataError):
    pass


# corruption
class BankTooShort(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnsupportedLeadCount(ConfigError):
    pass


class ZeroPowerLead(NumericError):
    pass


# retrieval
class EmptyDatabase(DataError):
    pass


# models and losses
class ShapeError(DataError):
    pass


class DimensionMismatch(ShapeError):
    pass


class BatchTooSmall(ConfigError):
    pass


class EmptyBatch(DataError):
    pass


class NonFiniteInput(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


# checkpoints and evaluation
class CorruptCheckpoint(DataError):
    pass


class ConfigMismatch(ConfigError):
    pass


class DegenerateLabels(DataError):
    pass


class NoPositives(DegenerateLabels):
    pass
