"""Exception hierarchy shared by all modules.

Each class maps to one CLI exit code family; see cli.EXIT_CODES.
"""

from __future__ import annotations


class AnchorLMError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(AnchorLMError):
    """Bad command-line usage or invalid option combination."""


class ConfigError(UsageError):
    """Inconsistent configuration, e.g. an AC-family policy with a vocab
    that has no anchor token."""


class InputError(AnchorLMError):
    """Unreadable, empty, or malformed input data."""


class ContractError(AnchorLMError):
    """A caller violated an operation's precondition, or an internal
    invariant failed (the latter must abort, never continue silently)."""


class UndefinedMetricError(ContractError):
    """A metric was requested on data for which it is undefined."""


class NumericError(AnchorLMError):
    """Non-finite values appeared where finite ones are required."""
