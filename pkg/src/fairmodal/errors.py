"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericError(ValueError):
    """Non-finite or otherwise unusable numeric input."""


class InputError(ValueError):
    """A caller-supplied argument is out of the accepted domain."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class StateError(RuntimeError):
    """An object was used in a state that forbids the operation."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class IngestionError(ValueError):
    """An external data file could not be parsed."""
