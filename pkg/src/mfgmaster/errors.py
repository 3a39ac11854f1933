"""Exception hierarchy shared across the package.

User errors (bad configs, bad arguments) and numerical failures
(divergence, non-convergence) are kept separate so the CLI can map them
to distinct exit codes.
"""


class MfgError(Exception):
    """Base class for all package errors."""


class ConfigError(MfgError):
    """Invalid user input: bad config file, unknown keys, bad arguments."""


class InvalidDimensionError(MfgError):
    """A state count or vector length is out of range."""


class SimplexError(MfgError):
    """A vector violates the probability-simplex invariants beyond tolerance."""


class BoundaryError(MfgError):
    """A finite-difference step leaves the simplex on both sides."""


class ModelError(MfgError):
    """A model produced an inadmissible quantity (e.g. non-conservative rates)."""


class NumericalError(MfgError):
    """Base class for runtime numerical failures (CLI exit code 2)."""


class IntegratorDivergedError(NumericalError):
    """An ODE integration left the simplex beyond the repair threshold."""


class NonConvergenceError(NumericalError):
    """A fixed-point iteration hit max_iters; carries the last residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingDivergedError(NumericalError):
    """A training loss became NaN or infinite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
