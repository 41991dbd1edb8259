"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: InputError -> 2, DependencyError -> 3,
NumericalError -> 4. CacheError is recoverable (treated as a miss).
"""


class SelfTrackError(Exception):
    """Base class for all pipeline errors."""


class InputError(SelfTrackError):
    """Unusable user input: bad file, bad config, violated precondition."""


class DependencyError(SelfTrackError):
    """A required external model/weights is unavailable."""


class CacheError(SelfTrackError):
    """A cache entry failed its integrity check."""


class NumericalError(SelfTrackError):
    """Optimization produced non-finite values."""
