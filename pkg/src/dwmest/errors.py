"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors -> 2, data/schema
errors -> 3, numerical failures -> 4.
"""


class DwmestError(Exception):
    """Base class for all package errors."""


class ConfigError(DwmestError):
    """Invalid or inconsistent user configuration."""


class SchemaError(DwmestError):
    """Input data violates the expected tabular schema."""


class ConsistencyError(SchemaError):
    """Outcome presence and the observability indicator disagree."""


class RankError(DwmestError):
    """A design or information matrix is rank deficient."""

    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = list(columns) if columns is not None else []


class SeparationError(DwmestError):
    """Binary response is constant or perfectly separated."""


class ConvergenceError(DwmestError):
    """Iterative solver failed to converge; carries the last iterate."""

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class EstimationInfeasibleError(DwmestError):
    """No usable rows remain (empty arm, all trimmed, zero weights)."""


class ReliabilityError(DwmestError):
    """Too many replicate-level failures for the result to be trusted."""


class DensityInstabilityError(DwmestError):
    """A kernel density estimate is too close to zero to divide by."""


class MissingOutcomeError(DwmestError):
    """An unobserved outcome entry was read."""
