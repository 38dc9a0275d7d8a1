"""Shared exception types."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (bad dims, empty input, ...)."""


class ConfigError(ValueError):
    """An invalid or infeasible configuration value."""


class IdxParseError(ValueError):
    """A malformed IDX dataset file; the message names the failing byte offset."""
