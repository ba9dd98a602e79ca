class SeparationError(ValueError):
    """Base class for invalid input to the separation library."""


class BadConfigError(SeparationError):
    pass


class ShapeMismatchError(SeparationError):
    pass


class SignalError(SeparationError):
    pass


class PermutationError(SeparationError):
    pass


class DatasetError(SeparationError):
    pass


class CheckpointError(SeparationError):
    pass
