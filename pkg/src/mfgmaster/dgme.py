"""Space-time residual training of a single master-equation surface.

One network U(t, x, eta; theta) is trained on the sampled maximum of
|PDE residual| + |terminal mismatch|.  The residual at a point is

    dU/dt + Hbar(x, eta, Delta_x U) + sum_z c_z dU/deta_z,
    c_z = sum_y eta_y gamma*_z(y, Delta_y U, eta),

where the transport double sum collapses to a plain eta-gradient
contraction because every selector row sums to zero.  Training runs a
mean-square warmup phase followed by a max-focused phase whose gradient
concentrates on the worst sampled points (see DgmeConfig).
"""

from dataclasses import dataclass, field

import numpy as np

from . import simplex
from .errors import ConfigError, TrainingDivergedError
from .models import compute_bounds
from .nets import NeuralSurface
from .optim import Adam


@dataclass
class DgmeConfig:
    """Two-phase schedule: a mean-square warmup shapes the whole surface,
    then a max-focused phase drives down the worst sampled points.

    Plain argmax-subgradient steps on the sampled max stall far from the
    optimum (one point per update carries too little signal), so the
    warmup minimizes mean(residual^2 + terminal^2) first and the second
    phase applies log-sum-exp weights concentrated on the finetune_topk
    worst samples of a larger batch (hard max when lse_temperature is
    None).  All learning-rate and temperature schedules decay
    exponentially across their phase.
    """

    warmup_iterations: int = 30000
    batch_size: int = 64
    finetune_iterations: int = 25000
    finetune_batch: int = 512
    finetune_topk: int = 32
    lr: float = 1e-3
    lr_warmup_final: float = 1e-5
    lr_finetune: float = 1e-5
    lr_final: float = 2e-6
    lse_temperature: float = 2e-3
    lse_temperature_final: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    hidden: tuple = (60, 60, 60, 60)
    activation: str = "tanh"
    output_activation: str = "identity"
    encoding: str = "scalar-state"
    seed: int = 0
    # terminal mismatch at the interior batch's own (x, eta) when True,
    # at an independent terminal batch when False
    couple_terminal: bool = True
    holdout_factor: int = 8
    trace_every: int = 1

    def validate(self):
        if self.batch_size < 1 or self.finetune_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.warmup_iterations < 0 or self.finetune_iterations < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.lse_temperature is not None and self.lse_temperature <= 0:
            raise ConfigError("lse_temperature must be positive")
        if self.finetune_topk < 1:
            raise ConfigError("finetune_topk must be >= 1")
        return self


@dataclass
class DgmeResult:
    net: NeuralSurface
    loss_trace: np.ndarray
    holdout_loss: float
    config: DgmeConfig = field(repr=False, default=None)


def _state_values(net, t, eta):
    """U(t, w, eta) for every state w; returns (B, d) untruncated."""
    B, d = eta.shape
    blocks = [net.pack_inputs(np.full(B, w), eta, t) for w in range(d)]
    vals = net.forward(np.concatenate(blocks, axis=0), truncate=False)
    return vals.reshape(d, B).T


def dgme_residual_terms(net, model, t, x, eta):
    """Batched residual and terminal mismatch of the displayed loss.

    t: (B,), x: (B,) ints, eta: (B, d).  Returns (residual, terminal,
    aux) where aux carries the intermediates the gradient needs.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=int)
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    B, d = eta.shape
    u = _state_values(net, t, eta)  # (B, d)
    own = net.pack_inputs(x, eta, t)
    _, g_own = net.value_and_input_grad(own)
    g_t = g_own[:, 0]
    g_eta = g_own[:, net.eta_offset:]

    # transport coefficients from the selector at every origin state
    c = np.zeros((B, d))
    for y in range(d):
        c += eta[:, y:y + 1] * model.selector(y, u - u[:, y:y + 1], eta)

    hb = np.empty(B)
    for xv in range(d):
        idx = np.flatnonzero(x == xv)
        if idx.size:
            p = u[idx] - u[idx, xv:xv + 1]
            hb[idx] = model.hbar(xv, p, eta[idx])

    residual = g_t + hb + np.sum(c * g_eta, axis=1)

    term_in = net.pack_inputs(x, eta, model.horizon)
    u_T = net.forward(term_in, truncate=False)
    g_T = np.empty(B)
    for xv in range(d):
        idx = np.flatnonzero(x == xv)
        if idx.size:
            gv = model.terminal_cost(xv, eta[idx])
            g_T[idx] = gv
    terminal = u_T - g_T
    aux = {"u": u, "own": own, "c": c, "g_eta": g_eta, "term_in": term_in}
    return residual, terminal, aux


def dgme_residual(net, model, t, x, eta):
    """Signed PDE residual at one point."""
    r, _, _ = dgme_residual_terms(net, model, np.atleast_1d(t),
                                  np.atleast_1d(x), np.atleast_2d(eta))
    return float(r[0])


def dgme_point_loss(net, model, t, x, eta):
    """|residual| + |terminal mismatch| at one (t, x, eta)."""
    r, b, _ = dgme_residual_terms(net, model, np.atleast_1d(t),
                                  np.atleast_1d(x), np.atleast_2d(eta))
    return float(np.abs(r[0]) + np.abs(b[0]))


def _sample_batch(model, rng, n):
    t = rng.uniform(0.0, model.horizon, size=n)
    x = rng.integers(0, model.d, size=n)
    eta = simplex.sample_uniform(model.d, rng, n)
    return t, x, eta


def _weighted_gradient(net, model, t, x, eta, aux, coef_r, coef_b, chunk=64):
    """Gradient of sum_j (coef_r_j residual_j + coef_b_j terminal_j).

    The coefficient vectors encode the aggregation: a signed indicator
    at the argmax for the hard max, softmax weights times signs for
    log-sum-exp, 2 r_j / B for a mean-square phase.  Per sample this
    combines (i) the mixed second-order pass for the theta-derivative of
    dU/dt + c . grad_eta U at frozen c, (ii) the selector-Jacobian chain
    through c, (iii) the envelope derivative of Hbar, and (iv) the plain
    parameter gradient of the terminal term.  Vectorized over the
    nonzero coefficients, chunked to cap the (k, d, n_params) buffer.
    """
    d = model.d
    idx = np.flatnonzero((coef_r != 0.0) | (coef_b != 0.0))
    grad = np.zeros(net.n_params)
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        k = sel.size
        eta_s = eta[sel]
        t_s = t[sel]
        x_s = x[sel]
        u = aux["u"][sel]
        c = aux["c"][sel]
        g_eta = aux["g_eta"][sel]
        wr = coef_r[sel]

        blocks = np.concatenate(
            [net.pack_inputs(np.full(k, yv), eta_s, t_s) for yv in range(d)],
            axis=0,
        )
        _, G_flat, _ = net.backprop(blocks)
        G = G_flat.reshape(d, k, -1).transpose(1, 0, 2)  # (k, d, n)

        V = np.zeros((k, net.input_dim))
        V[:, 0] = 1.0  # time slot
        V[:, net.eta_offset:] = c
        _, ds = net.directional_param_grad(aux["own"][sel], V)
        g_r = ds  # (k, n)
        for y in range(d):
            p = u - u[:, y:y + 1]
            J = model.selector_jacobian(y, p, eta_s)  # (k, d, d)
            coef = eta_s[:, y:y + 1] * np.einsum("kz,kzw->kw", g_eta, J)
            g_r = g_r + np.einsum("kw,kwn->kn", coef, G)
            g_r = g_r - np.sum(coef, axis=1)[:, None] * G[:, y, :]
        # envelope derivative of Hbar: selector rows sum to zero, so the
        # Delta_x chain collapses to gamma @ G
        gamma = np.empty((k, d))
        for xv in range(d):
            m = np.flatnonzero(x_s == xv)
            if m.size:
                gamma[m] = model.hamiltonian_selector(
                    xv, u[m] - u[m, xv:xv + 1], eta_s[m]
                )
        g_r = g_r + np.einsum("kw,kwn->kn", gamma, G)
        grad += wr @ g_r
        wb = coef_b[sel]
        if np.any(wb != 0.0):
            _, G_T, _ = net.backprop(aux["term_in"][sel])
            grad += wb @ G_T
    return grad


def dgme_batch_loss(net, model, t, x, eta, temperature=None):
    """Sampled max (or log-sum-exp) of the pointwise losses."""
    r, b, _ = dgme_residual_terms(net, model, t, x, eta)
    pt = np.abs(r) + np.abs(b)
    if temperature is None:
        return float(np.max(pt))
    return float(temperature * np.log(np.sum(np.exp(pt / temperature))))


def _schedule(v0, v1, n):
    if n <= 1 or v1 is None or v0 == v1:
        return lambda it: v0
    q = (v1 / v0) ** (1.0 / (n - 1))
    return lambda it: v0 * q ** it


def train_dgme(model, config=None):
    """Two-phase sampled-loss training; returns DgmeResult.

    Fresh uniform (t, x, eta) samples every iteration.  The recorded
    trace entry is always the batch hard-max of the pointwise loss, and
    the held-out loss is the max over holdout_factor x finetune_batch
    fresh points at the end.
    """
    config = (config or DgmeConfig()).validate()
    rng = np.random.default_rng(config.seed)
    bounds = compute_bounds(model)
    trainer_model = model.smoothed()
    net = NeuralSurface(
        model.d, with_time=True, hidden=config.hidden,
        activation=config.activation,
        output_activation=config.output_activation,
        encoding=config.encoding, truncation_cap=bounds.u_bound,
        rng=rng,
    )
    opt = Adam(net.n_params, lr=config.lr, beta1=config.beta1,
               beta2=config.beta2)
    trace = []

    def record(loss, it):
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at iteration {it}", step=it
            )
        if it % config.trace_every == 0:
            trace.append(loss)

    # phase 1: mean-square warmup
    n1 = config.warmup_iterations
    lr1 = _schedule(config.lr, config.lr_warmup_final, n1)
    B = config.batch_size
    for it in range(n1):
        opt.lr = lr1(it)
        t, x, eta = _sample_batch(model, rng, B)
        r, b, aux = dgme_residual_terms(net, trainer_model, t, x, eta)
        record(float(np.max(np.abs(r) + np.abs(b))), it)
        grad = _weighted_gradient(net, trainer_model, t, x, eta, aux,
                                  2.0 * r / B, 2.0 * b / B)
        opt.step(net.theta, grad)

    # phase 2: max-focused refinement
    n2 = config.finetune_iterations
    lr2 = _schedule(config.lr_finetune, config.lr_final, n2)
    tau2 = (
        None
        if config.lse_temperature is None
        else _schedule(config.lse_temperature, config.lse_temperature_final, n2)
    )
    opt2 = Adam(net.n_params, lr=config.lr_finetune, beta1=config.beta1,
                beta2=config.beta2)
    B2 = config.finetune_batch
    for it in range(n2):
        opt2.lr = lr2(it)
        t, x, eta = _sample_batch(model, rng, B2)
        r, b, aux = dgme_residual_terms(net, trainer_model, t, x, eta)
        if config.couple_terminal:
            pt = np.abs(r) + np.abs(b)
            loss_extra = 0.0
        else:
            # two separate maxima: interior residual plus an independent
            # terminal batch
            _, xT, etaT = _sample_batch(model, rng, B2)
            termT = net.forward(net.pack_inputs(xT, etaT, model.horizon),
                                truncate=False)
            gT = np.empty(B2)
            for xv in range(model.d):
                idx = np.flatnonzero(xT == xv)
                if idx.size:
                    gT[idx] = trainer_model.terminal_cost(xv, etaT[idx])
            termT = termT - gT
            kT = int(np.argmax(np.abs(termT)))
            pt = np.abs(r)
            loss_extra = float(np.abs(termT[kT]))
        w = np.zeros(pt.size)
        if tau2 is None:
            j = int(np.argmax(pt))
            w[j] = 1.0
        else:
            tau = tau2(it)
            wf = np.exp((pt - np.max(pt)) / tau)
            top = np.argsort(wf)[-config.finetune_topk:]
            w[top] = wf[top] / np.sum(wf[top])
        record(float(np.max(pt)) + loss_extra, n1 + it)
        coef_b = w * np.sign(b) if config.couple_terminal else np.zeros(pt.size)
        grad = _weighted_gradient(net, trainer_model, t, x, eta, aux,
                                  w * np.sign(r), coef_b, chunk=32)
        if not config.couple_terminal:
            inp = net.pack_inputs(int(xT[kT]), etaT[kT][None, :], model.horizon)
            _, G_T, _ = net.backprop(inp)
            grad += float(np.sign(termT[kT])) * G_T[0]
        opt2.step(net.theta, grad)

    t, x, eta = _sample_batch(model, rng,
                              config.holdout_factor * config.finetune_batch)
    holdout = dgme_batch_loss(net, model, t, x, eta)
    return DgmeResult(net, np.asarray(trace), holdout, config)
