"""Exception types shared across the package.

The CLI maps these onto process exit codes (usage -> 2, capacity -> 3).
"""


class UsageError(ValueError):
    """Invalid arguments or a violated precondition."""


class CapacityError(RuntimeError):
    """A size limit (edges, window, memory guard) was exceeded."""


class CensoringError(RuntimeError):
    """Too many explorations hit the site cap for the estimate to be trusted."""

    def __init__(self, message, censored_rate):
        super().__init__(message)
        self.censored_rate = censored_rate


class ConsistencyError(RuntimeError):
    """An internal normalization or invariant check failed."""
