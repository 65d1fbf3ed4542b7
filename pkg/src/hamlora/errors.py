"""Exception types shared across the package."""


class HamloraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HamloraError):
    """Operand dimensions do not conform."""


class ConfigError(HamloraError):
    """A configuration value is missing, malformed, or out of range."""


class DegenerateInputError(HamloraError):
    """Input is structurally valid but numerically unusable (e.g. zero norm)."""


class InputError(HamloraError):
    """Runtime data violates a precondition (empty dataset, unseen class id)."""


class StateError(HamloraError):
    """Operation invoked in a state where it is undefined (e.g. empty registry)."""


class TrainingError(HamloraError):
    """Optimization failed, typically a divergent (non-finite) loss."""


class FormatError(HamloraError):
    """A serialized file is corrupt, truncated, or has the wrong magic/version."""
