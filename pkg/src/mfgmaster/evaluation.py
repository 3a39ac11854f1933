"""Cross-method comparison, equilibrium reconstruction, figure-data
export and the simplex sampling-rate study.

Every solution method is wrapped behind the same values(t, x, eta)
interface so comparisons and reconstructions do not care whether the
surface came from a trained network, a backward family of networks, or
the classical forward-backward solver.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import simplex
from .errors import ConfigError
from .ode import TimeGrid, Trajectory, propagate_measure, solve_mfg_system


class OracleSurface:
    """Classical-solver view of U: one forward-backward solve per (t, eta).

    Solves are cached on rounded keys, so repeated evaluation along a
    trajectory costs one solve per distinct (t, eta).
    """

    def __init__(self, model, n_steps=100, tol=1e-8, max_iters=200,
                 substeps=1):
        self.model = model
        self.n_steps = n_steps
        self.tol = tol
        self.max_iters = max_iters
        self.substeps = substeps
        self._cache = {}

    def _solve(self, t, eta):
        key = (round(float(t), 10), tuple(np.round(eta, 10)))
        if key not in self._cache:
            T = self.model.horizon
            if t >= T - 1e-12:
                vals = np.array([
                    self.model.terminal_cost(x, np.asarray(eta, dtype=float))
                    for x in range(self.model.d)
                ])
            else:
                steps = max(2, int(round(self.n_steps * (T - t) / T)))
                grid = TimeGrid.uniform(steps, T, t_start=float(t))
                traj = solve_mfg_system(self.model, float(t), eta, grid,
                                        tol=self.tol,
                                        max_iters=self.max_iters,
                                        substeps=self.substeps)
                vals = traj.values_u[0]
            self._cache[key] = vals
        return self._cache[key]

    def values(self, t, x, eta):
        x = np.atleast_1d(np.asarray(x, dtype=int))
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        if eta.shape[0] == 1 and x.size > 1:
            eta = np.broadcast_to(eta, (x.size, eta.shape[1]))
        return np.array([
            self._solve(t, eta[j])[x[j]] for j in range(x.size)
        ])


class DgmeSurface:
    """Space-time network view of U; truncation active."""

    def __init__(self, net):
        self.net = net

    def values(self, t, x, eta):
        x = np.atleast_1d(np.asarray(x, dtype=int))
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        return self.net.forward(self.net.pack_inputs(x, eta, t))


class DbmeSurface:
    """Backward-family view of U, piecewise in time.

    Evaluation between grid nodes uses the left node's network; at and
    beyond the last node, the terminal cost.
    """

    def __init__(self, solution):
        self.solution = solution

    def values(self, t, x, eta):
        from .dbme import _surface_values
        nodes = self.solution.grid.nodes
        i = int(np.searchsorted(nodes, float(t), side="right") - 1)
        i = min(max(i, 0), len(self.solution.nets) - 1)
        x = np.atleast_1d(np.asarray(x, dtype=int))
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        return _surface_values(self.solution.nets[i], x, eta, truncate=True)


@dataclass
class ComparisonReport:
    """Per-time mean and sup absolute differences of two U surfaces."""

    times: np.ndarray
    mean_abs: np.ndarray
    sup_abs: np.ndarray
    n_samples: int
    seed: int
    model_name: str = ""

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_abs_diff", "sup_abs_diff"])
            for t, m, s in zip(self.times, self.mean_abs, self.sup_abs):
                w.writerow([f"{t:.17g}", f"{m:.17g}", f"{s:.17g}"])


def compare_surfaces(a, b, model, eval_times, n_samples=200, seed=0):
    """Mean/sup |a - b| over uniform (x, eta) at each requested time."""
    rng = np.random.default_rng(seed)
    times = np.asarray(eval_times, dtype=float)
    means, sups = [], []
    for t in times:
        x = rng.integers(0, model.d, size=n_samples)
        eta = simplex.sample_uniform(model.d, rng, n_samples)
        diff = np.abs(a.values(t, x, eta) - b.values(t, x, eta))
        means.append(float(np.mean(diff)))
        sups.append(float(np.max(diff)))
    return ComparisonReport(times, np.asarray(means), np.asarray(sups),
                            n_samples, seed, getattr(model, "name", ""))


def reconstruct_equilibrium(surface, model, eta, grid, substeps=2):
    """Equilibrium flow induced by a value surface.

    Integrates the forward Kolmogorov equation with rates from the
    surface's finite differences and reads the value path off the
    surface along the flow.
    """
    eta = simplex.validate_distribution(eta, " (initial measure)")
    nodes = grid.nodes
    d = model.d
    mu = np.empty((nodes.size, d))
    u = np.empty((nodes.size, d))
    mu[0] = eta
    all_x = np.arange(d)
    for i in range(nodes.size):
        u[i] = surface.values(nodes[i], all_x, np.tile(mu[i], (d, 1)))
        if i == nodes.size - 1:
            break

        def rates(t, rho):
            vals = surface.values(t, all_x, np.tile(rho, (d, 1)))
            return model.rate_matrix(vals, rho)

        mu[i + 1] = propagate_measure(rates, mu[i], nodes[i], nodes[i + 1],
                                      substeps=substeps, check_rates=False)
    return Trajectory(grid, u, mu)


def sampling_rate_study(d, K_list, trials=100000, seed=0, chunk=512):
    """Monte Carlo decay rate of the sampled-max covering error proxy.

    Estimates E[min over K uniform simplex samples of the L1 norm of the
    first d-1 coordinates] for each K and fits the log-log slope, which
    should approach -1/(d-1).  Returns (means, slope).
    """
    if d < 2:
        raise ConfigError("the study needs d >= 2")
    if any(K < 1 for K in K_list):
        raise ConfigError("sample counts must be >= 1")
    rng = np.random.default_rng(seed)
    means = []
    for K in K_list:
        total = 0.0
        done = 0
        while done < trials:
            n = min(chunk, trials - done)
            e = rng.standard_exponential((n, K, d))
            # |p(kappa)|_1 = 1 - kappa_d for simplex vectors
            frac = 1.0 - e[:, :, d - 1] / np.sum(e, axis=2)
            total += float(np.sum(np.min(frac, axis=1)))
            done += n
        means.append(total / trials)
    if len(K_list) < 2:
        return np.asarray(means), float("nan")
    slope = float(np.polyfit(np.log(np.asarray(K_list, dtype=float)),
                             np.log(np.asarray(means)), 1)[0])
    return np.asarray(means), slope


def estimate_value_lipschitz(model, n_starts=32, n_pairs=1000, n_steps=50,
                             seed=0, tol=1e-8):
    """Empirical Lipschitz constant of U in eta from oracle trajectories.

    Solves the forward-backward system from random initial measures; the
    value surface points collected along the flows (same time node,
    different measures) give difference quotients whose maximum is the
    estimate.
    """
    rng = np.random.default_rng(seed)
    grid = TimeGrid.uniform(n_steps, model.horizon)
    mus, us = [], []
    for _ in range(n_starts):
        eta = simplex.sample_uniform(model.d, rng)
        traj = solve_mfg_system(model, 0.0, eta, grid, tol=tol)
        mus.append(traj.values_mu)
        us.append(traj.values_u)
    mus = np.stack(mus)  # (S, T, d)
    us = np.stack(us)
    best = 0.0
    for _ in range(n_pairs):
        i, j = rng.integers(0, n_starts, size=2)
        ti = rng.integers(0, n_steps + 1)
        dmu = np.linalg.norm(mus[i, ti] - mus[j, ti])
        if dmu < 1e-8:
            continue
        best = max(best, float(np.max(np.abs(us[i, ti] - us[j, ti])) / dmu))
    return best


def finite_difference_residual(surface, model, t, x, eta, h=1e-4):
    """Master-equation residual of any surface via finite differences.

    A slow, derivative-free cross-check used to validate that tabulated
    or trained surfaces satisfy the PDE.
    """
    eta = np.asarray(eta, dtype=float)
    d = model.d
    all_x = np.arange(d)
    u = surface.values(t, all_x, np.tile(eta, (d, 1)))
    du_dt = (
        surface.values(t + h, x, eta[None, :])[0]
        - surface.values(t - h, x, eta[None, :])[0]
    ) / (2.0 * h)
    c = np.zeros(d)
    for y in range(d):
        c += eta[y] * model.selector(y, u - u[y], eta)
    transport = 0.0
    # directional steps e_z - e_last keep the perturbation on the simplex
    for z in range(d):
        if c[z] == 0.0 or z == d - 1:
            continue
        step = np.zeros(d)
        step[z], step[d - 1] = h, -h
        dz = (
            surface.values(t, x, (eta + step)[None, :])[0]
            - surface.values(t, x, (eta - step)[None, :])[0]
        ) / (2.0 * h)
        transport += c[z] * dz  # c sums to zero, so the e_last leg cancels
    hb = model.hbar(int(np.atleast_1d(x)[0]), u - u[int(np.atleast_1d(x)[0])], eta)
    return float(du_dt + hb + transport)


def export_figure_data(kind, out_path, **inputs):
    """Write plot-ready CSV for one figure family.

    kinds: d2-lines (t, x, eta1, value), d3-simplex-heat
    (eta1, eta2, value), trajectory (t, x, u, mu), loss-curves
    (epoch, mean_loss), runtime-scaling (d, seconds, ratio).
    """
    if kind == "d2-lines":
        surface = inputs["surface"]
        times = inputs["times"]
        states = inputs.get("states", (0, 1))
        n_eta = inputs.get("n_eta", 101)
        e1 = np.linspace(0.0, 1.0, n_eta)
        eta = np.stack([e1, 1.0 - e1], axis=1)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "eta1", "value"])
            for t in times:
                for x in states:
                    vals = surface.values(t, np.full(n_eta, x, dtype=int), eta)
                    for ev, v in zip(e1, vals):
                        w.writerow([f"{t:.17g}", x, f"{ev:.17g}", f"{v:.17g}"])
    elif kind == "d3-simplex-heat":
        surface = inputs["surface"]
        t = inputs["t"]
        x = inputs["x"]
        n = inputs.get("resolution", 51)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eta1", "eta2", "value"])
            for e1 in np.linspace(0.0, 1.0, n):
                for e2 in np.linspace(0.0, 1.0 - e1, max(1, int(n * (1 - e1)))):
                    eta = np.array([[e1, e2, 1.0 - e1 - e2]])
                    v = surface.values(t, np.array([x]), eta)[0]
                    w.writerow([f"{e1:.17g}", f"{e2:.17g}", f"{v:.17g}"])
    elif kind == "trajectory":
        inputs["trajectory"].to_csv(out_path)
    elif kind == "loss-curves":
        trace = np.asarray(inputs["trace"], dtype=float)
        window = int(inputs.get("window", 30))
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss"])
            n_full = trace.size // window
            for e in range(n_full):
                m = float(np.mean(trace[e * window:(e + 1) * window]))
                w.writerow([e, f"{m:.17g}"])
    elif kind == "runtime-scaling":
        rows = inputs["measurements"]  # iterable of (d, seconds)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "seconds", "ratio_to_previous"])
            prev = None
            for d, sec in rows:
                ratio = "" if prev is None else f"{sec / prev:.17g}"
                w.writerow([d, f"{sec:.17g}", ratio])
                prev = sec
    else:
        raise ConfigError(f"unknown export kind {kind!r}")
    return out_path
