"""Deterministic federated-learning simulator with model-poisoning attacks."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, IdxParseError

__all__ = ["ConfigError", "ContractError", "IdxParseError", "__version__"]
