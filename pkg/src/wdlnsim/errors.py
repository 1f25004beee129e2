"""Exception types raised across the simulator."""


class WdlnError(Exception):
    """Base class for all simulator errors."""


class ConfigError(WdlnError, ValueError):
    """Invalid configuration value. The message names the offending field."""


class InvalidSchedule(WdlnError):
    """A scheduler returned a decision that violates the radio constraint."""


class MissingStateInfo(WdlnError):
    """A scheduler that needs per-device backlog was handed a state without it."""


class NonFiniteGradient(WdlnError, FloatingPointError):
    """Local training produced NaN or Inf (usually a step size that is too large)."""


class ZeroDenominator(WdlnError, ZeroDivisionError):
    """Central learning weights are undefined because no samples exist yet."""


class TooLarge(WdlnError):
    """The requested MDP exceeds the exact-DP tractability guard."""


class NoConvergence(WdlnError):
    """Relative value iteration did not reach the span tolerance."""


class SingularChain(WdlnError):
    """The Markov chain induced by a policy has more than one recurrent class."""
