"""Exception types shared across the package."""


class BotsError(Exception):
    """Base class for package errors."""


class InvalidInput(BotsError, ValueError):
    """An argument violates an operation's preconditions."""


class ConditioningError(BotsError, ArithmeticError):
    """A matrix that must be positive definite is not."""


class ConfigError(BotsError, ValueError):
    """Experiment configuration is malformed or inconsistent."""


class InsufficientData(BotsError, ValueError):
    """Too few observations to fit a model."""


class EpisodeError(BotsError, RuntimeError):
    """An environment step failed mid-episode."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"environment step {step} failed: {cause}")
        self.step = step


class RunError(BotsError, RuntimeError):
    """A BOTS run aborted; carries the round and candidate that failed."""

    def __init__(self, round_index: int, candidate: int | None, cause: BaseException):
        where = f"round {round_index}" + (f", candidate {candidate}" if candidate is not None else "")
        super().__init__(f"{where}: {cause}")
        self.round_index = round_index
        self.candidate = candidate
