"""Exception hierarchy shared by all pipeline stages."""


class RadTriageError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RadTriageError, ValueError):
    pass


class NumericError(RadTriageError, ArithmeticError):
    pass


class ParameterError(RadTriageError, ValueError):
    pass


class ConfigurationError(RadTriageError, ValueError):
    pass


class CapacityError(RadTriageError, ValueError):
    pass


class LabelError(RadTriageError, ValueError):
    pass


class InputError(RadTriageError, ValueError):
    pass


class UndefinedMetricError(RadTriageError, ValueError):
    """A metric has no defined value for the given input (e.g. single-class AUROC)."""


class PartitionError(RadTriageError, ValueError):
    pass


class FormatError(RadTriageError, ValueError):
    """Checkpoint or data file does not match the expected on-disk format."""
