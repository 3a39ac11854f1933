"""Deterministic integration: Kolmogorov forward flows and the coupled
forward-backward system solved by damped Picard iteration.

The fixed point of the forward-backward system is the classical oracle
against which both neural schemes are validated.  Everything here uses a
classic fixed-step RK4; the measure is renormalized at grid nodes under
the strict repair policy from the simplex module.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import interp1d

from . import simplex
from .errors import (
    IntegratorDivergedError,
    ModelError,
    NonConvergenceError,
    SimplexError,
)
from .models import compute_bounds

RATE_ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Increasing partition t_0 < ... < t_N of a time interval."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, n_steps, t_end, t_start=0.0):
        return cls(np.linspace(t_start, t_end, n_steps + 1))

    @property
    def n_steps(self):
        return self.nodes.size - 1

    @property
    def increments(self):
        return np.diff(self.nodes)

    @property
    def mesh(self):
        return float(np.max(self.increments))


@dataclass
class Trajectory:
    """Paired value / measure paths on a shared grid.

    values_u[i] holds u(t_i, x) for all x; values_mu[i] the distribution.
    """

    grid: TimeGrid
    values_u: np.ndarray
    values_mu: np.ndarray
    converged: bool = True
    residual: float = 0.0
    iterations: int = 0

    def to_csv(self, path):
        """Plot-ready export with columns t, x, u, mu."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "u", "mu"])
            for i, t in enumerate(self.grid.nodes):
                for x in range(self.values_u.shape[1]):
                    writer.writerow([
                        f"{t:.17g}",
                        x,
                        f"{self.values_u[i, x]:.17g}",
                        f"{self.values_mu[i, x]:.17g}",
                    ])


def _check_rate_matrix(Q):
    if np.max(np.abs(np.sum(Q, axis=-1))) > RATE_ROW_SUM_TOL * max(1.0, np.max(np.abs(Q))):
        raise ModelError("rate matrix rows do not sum to zero")
    off = Q - np.diag(np.diag(Q))
    if np.min(off) < -1e-12:
        raise ModelError("negative off-diagonal transition rate")


def propagate_measure(rate_field, kappa, t_start, t_end, substeps=2, check_rates=True):
    """RK4 solution of d rho / dt = rho . Q(t, rho) over [t_start, t_end].

    ``rate_field(t, rho)`` returns the (d, d) rate matrix with rows
    summing to zero.  The output is renormalized under the strict repair
    policy; violations beyond it raise IntegratorDivergedError.
    """
    rho = np.array(kappa, dtype=float)
    h = (t_end - t_start) / substeps

    def f(t, r):
        Q = np.asarray(rate_field(t, r), dtype=float)
        if check_rates:
            _check_rate_matrix(Q)
        return r @ Q

    t = t_start
    for _ in range(substeps):
        k1 = f(t, rho)
        k2 = f(t + h / 2.0, rho + h / 2.0 * k1)
        k3 = f(t + h / 2.0, rho + h / 2.0 * k2)
        k4 = f(t + h, rho + h * k3)
        rho = rho + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    try:
        return simplex.repair_distribution(rho, where=" (propagate_measure)")
    except SimplexError as exc:
        raise IntegratorDivergedError(str(exc)) from exc


def _interpolator(nodes, values):
    """Columnwise interpolant over grid nodes; cubic when enough nodes."""
    kind = "cubic" if nodes.size >= 4 else "linear"
    return interp1d(nodes, values, kind=kind, axis=0, assume_sorted=True,
                    fill_value="extrapolate")


def _backward_values(model, grid, mu_path, substeps):
    """Integrate du/dt = -Hbar(x, mu(t), Delta_x u) down from u(T) = g."""
    nodes = grid.nodes
    d = model.d
    mu_of_t = _interpolator(nodes, mu_path)
    u = np.empty((nodes.size, d))
    u[-1] = [model.terminal_cost(x, mu_path[-1]) for x in range(d)]

    def f(t, uvec):
        mu_t = mu_of_t(t)
        return -np.array(
            [model.hbar(x, uvec - uvec[x], mu_t) for x in range(d)]
        )

    for i in range(nodes.size - 2, -1, -1):
        h = (nodes[i] - nodes[i + 1]) / substeps  # negative step
        t = nodes[i + 1]
        uvec = u[i + 1].copy()
        for _ in range(substeps):
            k1 = f(t, uvec)
            k2 = f(t + h / 2.0, uvec + h / 2.0 * k1)
            k3 = f(t + h / 2.0, uvec + h / 2.0 * k2)
            k4 = f(t + h, uvec + h * k3)
            uvec = uvec + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        u[i] = uvec
    return u


def _forward_measure(model, grid, u_path, eta, substeps):
    """Integrate the Kolmogorov equation driven by rates from u_path."""
    nodes = grid.nodes
    u_of_t = _interpolator(nodes, u_path)
    mu = np.empty_like(u_path)
    mu[0] = simplex.validate_distribution(eta, " (initial measure)")
    for i in range(nodes.size - 1):
        def rates(t, rho):
            return model.rate_matrix(u_of_t(t), rho)

        mu[i + 1] = propagate_measure(
            rates, mu[i], nodes[i], nodes[i + 1], substeps=substeps,
            check_rates=False,
        )
    return mu


def solve_mfg_system(model, t0, eta, grid, damping=0.5, tol=1e-8,
                     max_iters=200, substeps=1):
    """Damped Picard iteration on the coupled forward-backward system.

    Given the current measure path, the backward value equation is
    integrated from the terminal cost, the forward equation re-propagated
    with the induced optimal rates, and the measure path relaxed with
    factor ``damping`` (halved after three consecutive residual
    increases).  Stops when the sup-norm measure update falls below tol.
    """
    nodes = grid.nodes
    if abs(nodes[0] - t0) > 1e-12:
        raise ValueError("grid must start at t0")
    if abs(nodes[-1] - model.horizon) > 1e-9:
        raise ValueError("grid must end at the model horizon")
    eta = simplex.validate_distribution(eta, " (initial measure)")

    mu = np.tile(eta, (nodes.size, 1))
    omega = float(damping)
    if not 0.0 < omega <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    last_residual = np.inf
    increases = 0
    residual = np.inf
    for it in range(1, max_iters + 1):
        u = _backward_values(model, grid, mu, substeps)
        mu_new = _forward_measure(model, grid, u, eta, substeps)
        residual = float(np.max(np.abs(mu_new - mu)))
        mu = (1.0 - omega) * mu + omega * mu_new
        if residual < tol:
            u = _backward_values(model, grid, mu, substeps)
            return Trajectory(grid, u, mu, converged=True,
                              residual=residual, iterations=it)
        if residual > last_residual:
            increases += 1
            if increases >= 3:
                omega = max(omega / 2.0, 1e-3)
                increases = 0
        else:
            increases = 0
        last_residual = residual
    raise NonConvergenceError(
        f"MFG fixed point not reached after {max_iters} iterations "
        f"(last residual {residual:.3e})",
        residual=residual,
    )


@dataclass
class OracleTable:
    """Tabulated master-equation values U(t0, x, eta) from the oracle."""

    model: object
    records: list = field(default_factory=list)

    def add(self, t0, eta, values, converged, residual):
        self.records.append({
            "t0": float(t0),
            "eta": np.asarray(eta, dtype=float),
            "values": None if values is None else np.asarray(values, dtype=float),
            "converged": bool(converged),
            "residual": float(residual),
        })


def master_surface_from_oracle(model, n_steps, points, tol=1e-8,
                               max_iters=200, substeps=1):
    """Solve the MFG system for each requested (t0, eta) point.

    ``n_steps`` counts grid intervals on the full horizon; sub-horizon
    solves keep roughly the same spacing.  Non-convergence is recorded
    per point, not fatal.
    """
    table = OracleTable(model)
    for t0, eta in points:
        traj, err = solve_oracle_point(model, t0, eta, n_steps, tol,
                                       max_iters, substeps)
        if traj is None:
            table.add(t0, eta, None, False, err.residual or np.inf)
        else:
            table.add(t0, eta, traj.values_u[0], True, traj.residual)
    return table


def solve_oracle_point(model, t0, eta, n_steps, tol=1e-8, max_iters=200,
                       substeps=1):
    """One oracle solve from (t0, eta); returns (trajectory, error)."""
    T = model.horizon
    steps = max(2, int(round(n_steps * (T - t0) / T))) if t0 > 0 else n_steps
    grid = TimeGrid.uniform(steps, T, t_start=t0)
    try:
        traj = solve_mfg_system(model, t0, eta, grid, tol=tol,
                                max_iters=max_iters, substeps=substeps)
        bound = compute_bounds(model).u_bound
        if np.max(np.abs(traj.values_u)) > bound + 1e-6:
            raise NonConvergenceError(
                "oracle value exceeds the a-priori bound", residual=np.inf
            )
        return traj, None
    except NonConvergenceError as exc:
        return None, exc
