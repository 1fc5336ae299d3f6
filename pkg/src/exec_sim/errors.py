"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value failed validation.

    ``field`` is the dotted path of the offending key (``parent.total_qty``).
    """

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class InvalidStateError(RuntimeError):
    """Operation not allowed in the object's current state."""


class DomainError(ValueError):
    """Value outside the domain of a utility function."""


class UnsupportedInputError(ValueError):
    """Input the algorithm cannot handle (e.g. an MDP with unbounded episodes)."""
