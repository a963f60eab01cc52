"""Exception taxonomy shared across the package."""


class ReinaLabError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgument(ReinaLabError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class ResourceLimit(ReinaLabError, RuntimeError):
    """A request exceeds a hard feasibility bound (e.g. enumeration size)."""


class OutOfDomain(ReinaLabError, ValueError):
    """A metric was asked to evaluate outside its measured domain."""


class CheckpointError(ReinaLabError, RuntimeError):
    """A checkpoint file is missing, corrupt, or has an unknown version."""


class TrainingDiverged(ReinaLabError, RuntimeError):
    """Training aborted because the loss became non-finite."""
