"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(ValueError):
    """A caller broke an operation precondition (e.g. mismatched lengths)."""


class OutOfRangeError(ValueError):
    """A query point lies outside the supported range."""


class ProjectionAtInfinityError(ArithmeticError):
    """A point lies on the camera principal plane and projects to infinity."""


class MotionGenerationError(RuntimeError):
    """Random motion generation could not reach the requested target."""


class OptimizationError(RuntimeError):
    """The optimizer consumed a non-finite objective value."""


class TrainingError(RuntimeError):
    """Network training diverged."""


class ResourceError(RuntimeError):
    """A required resource (e.g. a learned model) is not loaded."""


class FileFormatError(RuntimeError):
    """A binary or text artifact failed validation on load."""
