"""
Exceptions shared by every app of the reconstruction engine.

Management commands map ``InvalidArgument`` and ``ConfigError`` to exit code 2
and any other ``SurfelError`` to exit code 3.
"""


class SurfelError(Exception):
    """Base class for engine errors"""


class InvalidArgument(SurfelError, ValueError):
    """An argument violates an operation's precondition on its value or shape"""


class PreconditionViolation(SurfelError):
    """An operation was called in a state it does not support"""


class ConfigError(SurfelError):
    """A structured config failed validation"""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CheckpointError(SurfelError):
    """A checkpoint could not be written or restored"""


class NonFiniteLoss(SurfelError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
