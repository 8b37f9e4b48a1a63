"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: configuration and data problems
exit 1, provider failures exit 2, partial corpus failures exit 3.
"""


class CapeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CapeError):
    """Invalid configuration, flags, or mechanism parameters."""


class DataError(CapeError):
    """Malformed vocabulary, embedding, fixture, or artifact files."""


class ProviderError(CapeError):
    """A logit/tokenization provider is unavailable or inconsistent."""
