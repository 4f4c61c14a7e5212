"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` used by the CLI when it
reports failures on a single line.  Subclasses of :class:`ValidationError`
mean the inputs were rejected before any work was done (CLI exit status 2);
everything else derived from :class:`ApdGainError` is a runtime failure
(exit status 1).
"""


class ApdGainError(Exception):
    kind = "runtime-error"


class ValidationError(ApdGainError, ValueError):
    kind = "validation-error"


class InvalidParameterError(ValidationError):
    kind = "invalid-parameter"


class DegenerateDistributionError(ValidationError):
    kind = "degenerate-distribution"


class DegenerateDataError(ValidationError):
    kind = "degenerate-data"


class GridTooCoarseError(ValidationError):
    kind = "grid-too-coarse"


class ParseError(ValidationError):
    kind = "parse-error"

    def __init__(self, message, bad_lines=()):
        super().__init__(message)
        self.bad_lines = list(bad_lines)


class NonMonotonicTimeError(ValidationError):
    kind = "non-monotonic-time"


class WindowTooShortError(ValidationError):
    kind = "window-too-short"


class NoPlateauError(ValidationError):
    kind = "no-plateau"


class TruncationError(ApdGainError):
    kind = "truncation-failure"


class SupportOverflowError(ApdGainError):
    kind = "support-overflow"


class DivergenceError(ApdGainError):
    """Ionization coefficients at or beyond avalanche breakdown."""

    kind = "divergence"


class NoSolutionError(ApdGainError):
    kind = "no-solution"


class CensoringError(ApdGainError):
    kind = "censoring"


class NoConvergenceError(ApdGainError):
    kind = "no-convergence"
