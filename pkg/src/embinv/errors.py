class EmbInvError(Exception):
    """Base class for package errors."""


class ConfigError(EmbInvError, ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(EmbInvError, ValueError):
    """An input violated an operation's preconditions (shape, norm, ...)."""


class TransportError(EmbInvError, RuntimeError):
    """A remote embedding endpoint failed and retries were exhausted."""


class TrainingError(EmbInvError, RuntimeError):
    """Training diverged or could not proceed."""
