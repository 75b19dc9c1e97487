class ValidationError(ValueError):
    """Bad shapes, configs or input files. CLI exit code 2."""


class DivergenceError(FloatingPointError):
    """A loss went non-finite. CLI exit code 3."""

    def __init__(self, message, part=None):
        super().__init__(message)
        self.part = part


class CheckpointError(ValidationError):
    """Unreadable, incomplete or incompatible checkpoint archive."""
