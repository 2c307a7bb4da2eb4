"""Exception hierarchy.

Three broad categories map onto CLI exit codes: ``DataError`` for bad or
insufficient input data, ``ConfigError`` for invalid configuration, and
``UsageError`` for command-line misuse. Everything else derives from
``ShiftwellError``.
"""


class ShiftwellError(Exception):
    pass


class DataError(ShiftwellError, ValueError):
    pass


class ConfigError(ShiftwellError, ValueError):
    pass


class UsageError(ShiftwellError):
    pass


# feature extraction
class InsufficientData(DataError):
    pass


class DegenerateSeries(DataError):
    pass


class TooSparse(DataError):
    pass


class EmptyHistogram(DataError):
    pass


class InsufficientCoverage(DataError):
    pass


class NoHistory(DataError):
    pass


class UnknownParticipant(DataError):
    pass


class MissingSurvey(DataError):
    pass


# statistics
class DegenerateVariance(DataError):
    pass


class ZeroExpected(DataError):
    pass


class TooFewSamples(DataError):
    pass


class SingleGroup(DataError):
    pass


class DegenerateGroups(DataError):
    pass


class InsufficientRows(DataError):
    pass


class DegenerateColumn(DataError):
    pass


# neural network
class ShapeMismatch(ShiftwellError, ValueError):
    pass


class InvalidClass(ShiftwellError, ValueError):
    pass


class UnknownRole(DataError):
    pass


class EmptyBatch(ShiftwellError, ValueError):
    pass


class DivergenceDetected(ShiftwellError, RuntimeError):
    pass


class UntrainedModel(ShiftwellError, RuntimeError):
    pass


class InvalidVariant(ConfigError):
    pass


# experiment harness
class OutOfRange(DataError):
    pass


class TooSmall(DataError):
    pass


# synthetic cohort
class InfeasibleSpec(ConfigError):
    pass


class CalibrationFailure(ShiftwellError, AssertionError):
    pass
