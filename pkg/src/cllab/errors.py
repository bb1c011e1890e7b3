"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not conform for the requested operation."""


class NonFiniteError(ValueError):
    """A tensor contains NaN or infinite values."""


class ContractError(ValueError):
    """Key sets, neuron sets or other structural pre-conditions disagree."""


class StateError(RuntimeError):
    """An operation was invoked in a state where it is not defined."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class FormatError(ValueError):
    """A data file does not follow its binary format."""


class UnknownTaskError(KeyError):
    """No output head is registered for the requested task."""


class UndefinedMetricError(ValueError):
    """A metric was requested where it has no definition."""


class DegenerateDistributionError(ValueError):
    """Normalisation of an all-zero importance map was requested."""
