"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyInputError(ValueError):
    """An operation received nothing to reduce over (all-masked, empty list, ...)."""


class ConfigError(ValueError):
    """A configuration, vocabulary, or precondition constraint is violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite numbers."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read back consistently."""
