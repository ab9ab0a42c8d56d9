"""Exception hierarchy shared by every module."""


class RDError(Exception):
    """Base class for all package errors."""


class InsufficientLocalData(RDError):
    """Too few usable observations (or rank deficiency) inside a one-sided window."""


class OutOfWindow(RDError):
    """A reconstruction point lies outside the fitted window."""


class DegenerateDensity(RDError):
    """A density estimate vanished or fell below the configured floor."""


class DegenerateSample(RDError):
    """The sample has no spread where spread is required."""


class DegenerateCell(RDError):
    """A conditioning cell of a ratio density estimator is empty."""


class WeakFirstStage(RDError):
    """A fuzzy-design denominator jump is too close to zero."""


class MissingSlopeJump(RDError):
    """A sharp kink design was requested without the known slope jump."""


class VanishingBias(RDError):
    """The estimated bias constant is numerically zero."""


class ConfigError(RDError):
    """Invalid configuration or option combination."""


class MissingColumn(RDError):
    def __init__(self, column):
        super().__init__(f"missing required column {column!r}")
        self.column = column


class ParseError(RDError):
    def __init__(self, line, detail=""):
        msg = f"cannot parse line {line}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.line = line


class EmptyFile(RDError):
    """Input file has no header or no data rows."""
