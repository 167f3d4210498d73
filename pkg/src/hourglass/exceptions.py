"""Error types; each maps onto a CLI exit code."""


class HourglassError(Exception):
    exit_code = 1


class ConfigError(HourglassError, ValueError):
    exit_code = 2


class DataError(HourglassError, ValueError):
    exit_code = 3


class NumericalAbort(HourglassError, RuntimeError):
    """Raised when a training loss turns non-finite.

    ``snapshot`` holds whatever the training loop saved for post-mortem
    (a checkpoint path or an in-memory state dict).
    """

    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
