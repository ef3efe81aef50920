class InputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class FormatError(ValueError):
    """Raised when a file or byte stream does not match its declared format."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite; carries the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
