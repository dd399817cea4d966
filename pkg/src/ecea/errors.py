from .autograd import DimensionError, NumericError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``checkpoint`` is the path of the last good state when one was written;
    ``losses`` holds the loss rows recorded up to the failure.
    """

    def __init__(self, message: str, checkpoint=None, losses=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.losses = list(losses or [])


__all__ = ["ConfigError", "DimensionError", "DivergenceError", "NumericError"]
