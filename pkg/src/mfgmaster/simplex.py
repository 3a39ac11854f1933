"""Geometry, validation and uniform sampling of the probability simplex.

A distribution over d states is a plain numpy array of d nonnegative
weights summing to one.  All tolerances live here so that every module
applies the same membership policy.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundaryError, InvalidDimensionError, SimplexError

# Membership tolerances: sum within SUM_TOL of 1, components above -NEG_TOL.
SUM_TOL = 1e-10
NEG_TOL = 1e-12
# ODE outputs may be repaired (clip at zero, renormalize) when the violation
# is below REPAIR_TOL; larger violations raise instead of being masked.
REPAIR_TOL = 1e-7


def validate_distribution(weights, where=""):
    """Check the simplex invariants, returning the array unchanged.

    Raises SimplexError when a component is below -NEG_TOL or the sum is
    off by more than SUM_TOL.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise InvalidDimensionError(f"distribution must be a nonempty vector{where}")
    if np.min(w) < -NEG_TOL:
        raise SimplexError(f"negative weight {np.min(w):.3e}{where}")
    s = float(np.sum(w))
    if abs(s - 1.0) > SUM_TOL:
        raise SimplexError(f"weights sum to {s!r}, not 1{where}")
    return w


def repair_distribution(weights, max_violation=REPAIR_TOL, where=""):
    """Clip tiny negatives and renormalize; reject large violations.

    Silent large repairs would mask integrator bugs, so any negative part
    or sum error above ``max_violation`` raises SimplexError.
    """
    w = np.asarray(weights, dtype=float)
    neg = float(-np.min(w)) if w.size else 0.0
    sum_err = abs(float(np.sum(w)) - 1.0)
    if neg > max_violation or sum_err > max_violation:
        raise SimplexError(
            f"simplex violation beyond repair threshold{where}: "
            f"min={-neg:.3e}, sum error={sum_err:.3e}"
        )
    w = np.clip(w, 0.0, None)
    return w / np.sum(w)


def sample_uniform(d, rng, n=None):
    """Uniform draw(s) on the simplex via normalized rate-1 exponentials.

    Returns shape (d,) when n is None, else (n, d).
    """
    if d < 1:
        raise InvalidDimensionError("state count d must be >= 1")
    shape = (d,) if n is None else (int(n), d)
    e = rng.standard_exponential(shape)
    return e / np.sum(e, axis=-1, keepdims=True)


def delta(values, x):
    """Finite-difference vector: component y is values[y] - values[x].

    ``values`` may be (d,) or batched (B, d); x indexes the state axis.
    """
    v = np.asarray(values, dtype=float)
    return v - v[..., x : x + 1] if v.ndim > 1 else v - v[x]


@dataclass(frozen=True)
class SimplexDirection:
    """Admissible direction e_z - e_y for derivatives on the simplex."""

    from_state: int
    to_state: int
    dim: int
    vector: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (0 <= self.from_state < self.dim and 0 <= self.to_state < self.dim):
            raise InvalidDimensionError("direction states out of range")
        v = np.zeros(self.dim)
        v[self.to_state] += 1.0
        v[self.from_state] -= 1.0
        object.__setattr__(self, "vector", v)


def directional_derivative(f, eta, direction, h=1e-6):
    """Finite-difference estimate of the simplex derivative of f at eta.

    Central difference when both eta +/- h*v stay in the simplex, one-sided
    otherwise; raises BoundaryError when the step leaves on both sides.
    Used only to test analytic gradients.
    """
    eta = np.asarray(eta, dtype=float)
    v = direction.vector

    def inside(w):
        return np.min(w) >= -NEG_TOL

    fwd, bwd = eta + h * v, eta - h * v
    if inside(fwd) and inside(bwd):
        return (f(fwd) - f(bwd)) / (2.0 * h)
    if inside(fwd):
        return (f(fwd) - f(eta)) / h
    if inside(bwd):
        return (f(eta) - f(bwd)) / h
    raise BoundaryError("step leaves the simplex in both directions")
