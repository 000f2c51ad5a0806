"""Exception hierarchy shared by every module."""


class VelocityError(Exception):
    """Base class for domain errors raised by this package."""


class ConfigError(VelocityError, ValueError):
    """A configuration violates its invariants."""


class DegenerateSamplesError(VelocityError, ValueError):
    """Samples are empty, all zero, or have too few distinct values."""


class InsufficientBinsError(VelocityError, ValueError):
    """Too few usable histogram bins for a regression."""


class InsufficientDataError(VelocityError, ValueError):
    """A trace or sample set is too short for the requested operation."""


class ZeroDensityError(VelocityError, ValueError):
    """A hazard was requested where the density vanishes."""


class DivergentAtZeroError(VelocityError, ValueError):
    """The model has no finite value at x = 0 (power laws)."""


class ConditionViolatedError(VelocityError, ValueError):
    """Derivatives of f do not vanish at the end of the support."""


class LedgerValidationError(VelocityError, ValueError):
    """A ledger line failed to parse or validate."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        self.message = message
        super().__init__(f"line {line_no}: {message}")
