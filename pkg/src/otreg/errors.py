"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes (config 2, hypothesis 3, numeric 4).
"""


class OTRegError(Exception):
    """Base class for every error raised by the package."""


class DomainError(OTRegError, ValueError):
    """Input outside the domain of an operation."""


class CapacityError(OTRegError, ValueError):
    """Problem size beyond what the exact solvers accept."""


class DegenerateInputError(DomainError):
    """Input carries no usable information (e.g. no flux on any shell)."""


class HypothesisViolation(OTRegError):
    """A smallness or admissibility hypothesis of a construction fails."""


class NumericError(OTRegError, ArithmeticError):
    """A numerical routine failed to reach its tolerance."""


class ConfigError(OTRegError, ValueError):
    """Malformed experiment configuration."""
