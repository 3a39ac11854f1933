"""Neural and classical solvers for finite-state mean-field-game
master equations.

Two training schemes approximate the master-equation value surface
U(t, x, eta): a backward-in-time scheme with one network per time node,
and a single space-time network trained on the PDE residual.  A damped
Picard solver for the underlying forward-backward ODE system serves as
the reference oracle.
"""

__version__ = "0.1.0"

from .errors import (
    BoundaryError,
    ConfigError,
    IntegratorDivergedError,
    InvalidDimensionError,
    MfgError,
    ModelError,
    NonConvergenceError,
    NumericalError,
    SimplexError,
    TrainingDivergedError,
)
from .models import (
    CyberModel,
    QuadraticModel,
    TrivialModel,
    build_model,
    compute_bounds,
)

__all__ = [
    "BoundaryError",
    "ConfigError",
    "CyberModel",
    "IntegratorDivergedError",
    "InvalidDimensionError",
    "MfgError",
    "ModelError",
    "NonConvergenceError",
    "NumericalError",
    "QuadraticModel",
    "SimplexError",
    "TrainingDivergedError",
    "TrivialModel",
    "build_model",
    "compute_bounds",
]
