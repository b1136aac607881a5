"""Exception types shared across the package."""


class FedAPMError(Exception):
    """Base class for all package errors."""


class ContractViolation(FedAPMError, ValueError):
    """A precondition on shapes, dimensions or argument ranges was violated."""


class InvalidObjectiveError(FedAPMError, ValueError):
    """An objective cannot be evaluated (e.g. empty data shard)."""


class EstimationError(FedAPMError, RuntimeError):
    """Lipschitz estimation could not produce usable probes."""


class DivergenceError(FedAPMError, FloatingPointError):
    """A solver produced a non-finite iterate."""

    def __init__(self, message, client=None, round=None):
        tag = []
        if client is not None:
            tag.append(f"client {client}")
        if round is not None:
            tag.append(f"round {round}")
        if tag:
            message = f"{message} ({', '.join(tag)})"
        super().__init__(message)
        self.client = client
        self.round = round


class ConfigError(FedAPMError, ValueError):
    """Invalid run configuration; the message names the offending key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class GenerationError(FedAPMError, ValueError):
    """Synthetic problem generation failed."""
