"""Backward-in-time training of one value network per partition node.

Starting from the terminal cost, each step trains net_i so that its
value at (x, kappa) matches the next node's (truncated) value at the
measure propagated over one interval by Kolmogorov's forward equation
with rates from net_i itself, plus the one-step Hamiltonian correction:

    target = U_{i+1}(x, M_i(kappa; theta)) - U_i(x, kappa; theta)
             + dt_i Hbar(x, kappa, Delta_x U_i),

minimized in sampled sup norm over (x, kappa).  The first-layer weight
matrix is projected onto a spectral-norm ball after every update.  The
propagation M_i depends on theta; the full gradient mode differentiates
through the RK4 substeps with a manual adjoint sweep, the detached mode
treats M_i as a constant per iteration.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import simplex
from .errors import ConfigError, IntegratorDivergedError, TrainingDivergedError
from .models import compute_bounds
from .nets import NeuralSurface, project_lipschitz
from .ode import TimeGrid
from .optim import Adam


@dataclass
class DbmeConfig:
    n_steps: int = 50
    samples_per_step: int = 256
    epochs_per_step: int = 300
    # multiplier on epochs at the scratch-trained step i = N-1
    final_step_factor: int = 4
    # fraction of each step's epochs spent on a mean-square warmup
    # before switching to the max objective (same rationale as DGME)
    warmup_fraction: float = 0.5
    lr: float = 1e-3
    lr_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    hidden: tuple = (60, 60, 60, 60)
    activation: str = "tanh"
    output_activation: str = "identity"
    encoding: str = "scalar-state"
    substeps: int = 2
    # None -> hard max; positive -> log-sum-exp temperature
    lse_temperature: float = None
    propagation_gradient: str = "full"  # or "detached"
    lipschitz_bound: float = None  # None -> d * a-priori value bound
    lipschitz_iters: int = 50
    warm_start: bool = True
    holdout_size: int = 4096
    seed: int = 0
    trace_every: int = 1

    def validate(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.samples_per_step < 1:
            raise ConfigError("samples_per_step must be >= 1")
        if self.propagation_gradient not in ("full", "detached"):
            raise ConfigError("propagation_gradient must be full or detached")
        if self.lse_temperature is not None and self.lse_temperature <= 0:
            raise ConfigError("lse_temperature must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        return self


class TerminalSurface:
    """The untrained node at t = T: exactly the terminal cost g."""

    def __init__(self, model):
        self.model = model
        self.d_states = model.d
        self.truncation_cap = compute_bounds(model).u_bound

    def values(self, x, eta):
        """g(x, eta) batched; x (B,), eta (B, d)."""
        x = np.asarray(x, dtype=int)
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        out = np.empty(eta.shape[0])
        for xv in range(self.model.d):
            idx = np.flatnonzero(x == xv)
            if idx.size:
                out[idx] = self.model.terminal_cost(xv, eta[idx])
        return out

    def eta_grad(self, x, eta):
        """Componentwise finite-difference gradient of g in eta."""
        h = 1e-6
        d = self.model.d
        g = np.empty(d)
        for z in range(d):
            ep = eta.copy(); ep[z] += h
            em = eta.copy(); em[z] -= h
            g[z] = (self.model.terminal_cost(int(x), ep)
                    - self.model.terminal_cost(int(x), em)) / (2.0 * h)
        return g


def _surface_values(net, x, eta, truncate=True):
    """Truncated values of a trained node or the terminal surface."""
    if isinstance(net, TerminalSurface):
        v = net.values(x, eta)
        return np.minimum(v, net.truncation_cap) if truncate else v
    return net.forward(net.pack_inputs(x, eta), truncate=truncate)


def _surface_eta_grad(net, x, eta):
    """Measure gradient of the (truncated) surface at one point."""
    if isinstance(net, TerminalSurface):
        return net.eta_grad(x, eta)
    inp = net.pack_inputs(x, eta[None, :])
    val, g = net.value_and_input_grad(inp)
    if net.truncation_cap is not None and val[0] > net.truncation_cap:
        return np.zeros(net.d_states)  # inside the flat truncated region
    return g[0, net.eta_offset:]


def _all_state_values(net, eta):
    """net values at every state, batched over measures: (B, d)."""
    B, d = eta.shape
    blocks = [net.pack_inputs(np.full(B, w), eta) for w in range(d)]
    vals = net.forward(np.concatenate(blocks, axis=0), truncate=False)
    return vals.reshape(d, B).T


def _drift(net, model, rho):
    """Kolmogorov right-hand side rho @ Q at a batch of measures."""
    u = _all_state_values(net, rho)
    Q = model.rate_matrix(u, rho)
    if Q.ndim == 2:
        Q = Q[None]
    return np.einsum("kw,kwz->kz", rho, Q)


def _repair_batch(rho, where):
    neg = float(-np.min(rho)) if rho.size else 0.0
    sums = np.sum(rho, axis=1)
    err = float(np.max(np.abs(sums - 1.0)))
    if neg > simplex.REPAIR_TOL or err > simplex.REPAIR_TOL:
        raise IntegratorDivergedError(
            f"simplex violation beyond repair threshold{where}: "
            f"min={-neg:.3e}, sum error={err:.3e}"
        )
    rho = np.clip(rho, 0.0, None)
    return rho / np.sum(rho, axis=1, keepdims=True)


def propagate_net_measure(net, model, kappa, dt, substeps=2):
    """Batched RK4 flow of kappa over one interval with net-driven rates."""
    rho = np.atleast_2d(np.asarray(kappa, dtype=float)).copy()
    h = dt / substeps
    for _ in range(substeps):
        k1 = _drift(net, model, rho)
        k2 = _drift(net, model, rho + h / 2.0 * k1)
        k3 = _drift(net, model, rho + h / 2.0 * k2)
        k4 = _drift(net, model, rho + h * k3)
        rho = rho + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _repair_batch(rho, " (propagate_net_measure)")


def _drift_vjp(net, model, rho, a):
    """Vector-Jacobian products of F(rho) = rho @ Q(u(rho), rho).

    Given the adjoint vector a, returns (a dF/drho, a dF/dtheta) at a
    single measure rho.  The rate matrix depends on rho twice: as the
    occupation weights and through the finite-difference arguments of
    the selector (plus any direct measure dependence of the rates).
    """
    d = model.d
    inp = np.concatenate(
        [net.pack_inputs(w, rho[None, :]) for w in range(d)], axis=0
    )
    vals, G, g_in = net.backprop(inp)
    E = g_in[:, net.eta_offset:]  # E[w, m] = du_w / drho_m
    Q = model.rate_matrix(vals, rho)
    g_rho = Q @ a
    g_theta = np.zeros(net.n_params)
    for w in range(d):
        p = vals - vals[w]
        J = model.selector_jacobian(w, p, rho)  # J[z, v] = dgam_z/dp_v
        coef = rho[w] * (a @ J)
        g_rho = g_rho + coef @ E - np.sum(coef) * E[w]
        g_theta = g_theta + coef @ G - np.sum(coef) * G[w]
        K = model.selector_state_jacobian(w, p, rho)
        g_rho = g_rho + rho[w] * (a @ K)
    return g_rho, g_theta


def _propagation_theta_grad(net, model, kappa, dt, substeps, a_final):
    """theta-gradient of a_final . M(kappa; theta) by an RK4 adjoint sweep."""
    # forward pass, caching every stage input
    rho = np.asarray(kappa, dtype=float).copy()
    h = dt / substeps
    stages = []
    f = lambda r: _drift(net, model, r[None, :])[0]
    for _ in range(substeps):
        k1 = f(rho)
        y2 = rho + h / 2.0 * k1
        k2 = f(y2)
        y3 = rho + h / 2.0 * k2
        k3 = f(y3)
        y4 = rho + h * k3
        k4 = f(y4)
        stages.append((rho.copy(), y2, y3, y4))
        rho = rho + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    # reverse sweep
    a = np.asarray(a_final, dtype=float).copy()
    g_theta = np.zeros(net.n_params)
    for rho0, y2, y3, y4 in reversed(stages):
        d4, gt4 = _drift_vjp(net, model, y4, (h / 6.0) * a)
        d3, gt3 = _drift_vjp(net, model, y3, (h / 3.0) * a + h * d4)
        d2, gt2 = _drift_vjp(net, model, y2, (h / 3.0) * a + (h / 2.0) * d3)
        d1, gt1 = _drift_vjp(net, model, rho0, (h / 6.0) * a + (h / 2.0) * d2)
        g_theta += gt1 + gt2 + gt3 + gt4
        a = a + d1 + d2 + d3 + d4
    return g_theta


def dbme_residuals(net_i, net_next, x, kappa, dt, model, substeps=2):
    """Signed one-step residuals for a batch of (x, kappa).

    Returns (residuals, M) with M the propagated measures; the target
    value from net_next is truncated, the trained net is not.
    """
    x = np.asarray(x, dtype=int)
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    M = propagate_net_measure(net_i, model, kappa, dt, substeps=substeps)
    target = _surface_values(net_next, x, M, truncate=True)
    u = _all_state_values(net_i, kappa)
    B = kappa.shape[0]
    cur = u[np.arange(B), x]
    hb = np.empty(B)
    for xv in range(model.d):
        idx = np.flatnonzero(x == xv)
        if idx.size:
            hb[idx] = model.hbar(xv, u[idx] - u[idx, xv:xv + 1], kappa[idx])
    return target - cur + dt * hb, M


def dbme_pointwise_residual(net_i, net_next, x, kappa, dt, model, substeps=2):
    """Absolute one-step residual at a single (x, kappa)."""
    r, _ = dbme_residuals(net_i, net_next, np.atleast_1d(x),
                          np.atleast_2d(kappa), dt, model, substeps)
    return float(np.abs(r[0]))


def dbme_step_loss(net_i, net_next, x, kappa, dt, model, substeps=2,
                   lse_temperature=None):
    """Sampled max (or log-sum-exp) of residuals over a sample set."""
    x = np.atleast_1d(np.asarray(x, dtype=int))
    if x.size == 0:
        raise ConfigError("empty sample set")
    r, _ = dbme_residuals(net_i, net_next, x, kappa, dt, model, substeps)
    r = np.abs(r)
    if lse_temperature is None:
        return float(np.max(r))
    return float(lse_temperature * np.log(np.sum(np.exp(r / lse_temperature))))


@dataclass
class DbmeSolution:
    grid: TimeGrid
    nets: list
    epsilons: np.ndarray
    loss_traces: list = field(repr=False, default=None)
    config: DbmeConfig = field(repr=False, default=None)

    @property
    def eps_max(self):
        return float(np.max(self.epsilons))

    def save(self, directory):
        """Write the backward family to a directory (one file per net).

        The terminal node is the exact terminal cost and is rebuilt from
        the model on load rather than serialized.
        """
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        trained = [net for net in self.nets
                   if not isinstance(net, TerminalSurface)]
        for i, net in enumerate(trained):
            net.save(out / f"step_{i:04d}.ckpt")
        meta = {
            "nodes": [f"{t:.17g}" for t in self.grid.nodes],
            "epsilons": [f"{e:.17g}" for e in self.epsilons],
            "n_nets": len(trained),
        }
        with open(out / "solution.json", "w") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def load(cls, directory, model=None):
        directory = Path(directory)
        with open(directory / "solution.json") as fh:
            meta = json.load(fh)
        nets = [
            NeuralSurface.load(directory / f"step_{i:04d}.ckpt")
            for i in range(meta["n_nets"])
        ]
        if model is not None:
            nets.append(TerminalSurface(model))
        grid = TimeGrid(np.array([float(t) for t in meta["nodes"]]))
        eps = np.array([float(e) for e in meta["epsilons"]])
        return cls(grid, nets, eps)


def _residual_gradient(net, model, x_j, kappa_j, M_j, dt, substeps,
                       net_next, full):
    """theta-gradient of the signed residual at one sample."""
    d = model.d
    inp = np.concatenate(
        [net.pack_inputs(w, kappa_j[None, :]) for w in range(d)], axis=0
    )
    vals, G, _ = net.backprop(inp)
    gamma = model.hamiltonian_selector(x_j, vals - vals[x_j], kappa_j)
    grad = -G[x_j] + dt * (gamma @ G)
    if full:
        a = _surface_eta_grad(net_next, x_j, M_j)
        if np.any(a != 0.0):
            grad = grad + _propagation_theta_grad(net, model, kappa_j, dt,
                                                  substeps, a)
    return grad


def _batch_residual_gradient(net, model, x, kappa, coeffs, dt, chunk=128):
    """sum_j coeffs_j d residual_j / d theta with the target detached.

    Vectorized companion of _residual_gradient for the mean-square
    warmup epochs, where every sample contributes and differentiating
    the propagated target for all of them would dominate the cost.
    """
    d = model.d
    grad = np.zeros(net.n_params)
    for s in range(0, x.size, chunk):
        xs = x[s:s + chunk]
        ks = kappa[s:s + chunk]
        cs = coeffs[s:s + chunk]
        k = xs.size
        blocks = np.concatenate(
            [net.pack_inputs(np.full(k, w), ks) for w in range(d)], axis=0
        )
        vals, G_flat, _ = net.backprop(blocks)
        u = vals.reshape(d, k).T
        G = G_flat.reshape(d, k, -1).transpose(1, 0, 2)  # (k, d, n)
        gamma = np.empty((k, d))
        for xv in range(d):
            m = np.flatnonzero(xs == xv)
            if m.size:
                gamma[m] = model.hamiltonian_selector(
                    xv, u[m] - u[m, xv:xv + 1], ks[m]
                )
        grad += dt * np.einsum("k,kw,kwn->n", cs, gamma, G)
        grad -= np.einsum("k,kn->n", cs, G[np.arange(k), xs])
    return grad


def train_dbme(model, config=None):
    """Backward loop of per-node trainings; returns DbmeSolution.

    Each node warm-starts from its successor, runs a mean-square warmup
    then max-objective epochs, projects the first layer after every
    update, and records eps_i as the held-out sampled max residual.
    """
    config = (config or DbmeConfig()).validate()
    rng = np.random.default_rng(config.seed)
    bounds = compute_bounds(model)
    trainer_model = model.smoothed()
    bound = config.lipschitz_bound
    if bound is None:
        bound = max(1.0, model.d * bounds.u_bound)
    grid = TimeGrid.uniform(config.n_steps, model.horizon)
    N = config.n_steps
    nets = [None] * N + [TerminalSurface(model)]
    epsilons = np.zeros(N + 1)
    traces = [None] * (N + 1)
    K = config.samples_per_step
    full = config.propagation_gradient == "full"

    for i in range(N - 1, -1, -1):
        dt = float(grid.nodes[i + 1] - grid.nodes[i])
        if config.warm_start and i < N - 1:
            net = nets[i + 1].clone()
        else:
            net = NeuralSurface(
                model.d, with_time=False, hidden=config.hidden,
                activation=config.activation,
                output_activation=config.output_activation,
                encoding=config.encoding, truncation_cap=bounds.u_bound,
                rng=rng, lipschitz_bound=bound,
            )
        net.lipschitz_bound = bound
        epochs = config.epochs_per_step
        if i == N - 1:
            epochs *= config.final_step_factor
        n_warm = int(round(config.warmup_fraction * epochs))
        lr_of = (
            (lambda it: config.lr) if config.lr_final is None or epochs <= 1
            else (lambda it: config.lr
                  * (config.lr_final / config.lr) ** (it / (epochs - 1)))
        )
        opt = Adam(net.n_params, lr=config.lr, beta1=config.beta1,
                   beta2=config.beta2)
        trace = []
        for it in range(epochs):
            opt.lr = lr_of(it)
            x = rng.integers(0, model.d, size=K)
            kappa = simplex.sample_uniform(model.d, rng, K)
            r, M = dbme_residuals(net, nets[i + 1], x, kappa, dt,
                                  trainer_model, config.substeps)
            absr = np.abs(r)
            loss = float(np.max(absr))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at node {i}, epoch {it}", step=i
                )
            if it % config.trace_every == 0:
                trace.append(loss)
            if it < n_warm:
                # mean-square epoch over every sample, target detached
                grad = _batch_residual_gradient(net, trainer_model, x, kappa,
                                                2.0 * r / K, dt)
            else:
                if config.lse_temperature is None:
                    picks = np.array([int(np.argmax(absr))])
                    coeffs = np.sign(r)
                else:
                    w = np.exp((absr - loss) / config.lse_temperature)
                    picks = np.flatnonzero(w / np.sum(w) > 1e-3)
                    coeffs = (w / np.sum(w[picks])) * np.sign(r)
                grad = np.zeros(net.n_params)
                for j in picks:
                    grad += coeffs[j] * _residual_gradient(
                        net, trainer_model, int(x[j]), kappa[j], M[j],
                        dt, config.substeps, nets[i + 1], full,
                    )
            opt.step(net.theta, grad)
            project_lipschitz(net, bound, iters=config.lipschitz_iters)
        x = rng.integers(0, model.d, size=config.holdout_size)
        kappa = simplex.sample_uniform(model.d, rng, config.holdout_size)
        epsilons[i] = dbme_step_loss(net, nets[i + 1], x, kappa, dt, model,
                                     config.substeps)
        nets[i] = net
        traces[i] = np.asarray(trace)
    return DbmeSolution(grid, nets, epsilons, traces, config)
