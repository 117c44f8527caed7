"""Shared error types."""


class ConfigError(ValueError):
    """Invalid configuration; messages name the offending config key."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient); carries the step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
