"""Problem definitions: costs, Hamiltonians and optimal rate selectors.

A model bundles everything the solvers need about one finite-state game:
state count d, horizon, admissible rate interval, running / mean-field /
terminal costs, the Hamiltonian H(x,p) (minimum of running cost plus
rate-price inner product) and its minimizing rate selector.

Vector conventions: p-arguments are finite-difference vectors
``p_z = u(z) - u(x)`` for the state x under consideration.  All selector
and Hamiltonian methods accept a single (d,) vector or a batch (B, d)
and return matching shapes.  Selector rows always sum to zero, with the
diagonal carrying minus the off-diagonal total.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# State indices of the cybersecurity model.
DS, US, DI, UI = 0, 1, 2, 3
CYBER_STATE_NAMES = ("DS", "US", "DI", "UI")


def _batched(p):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return p[None, :], True
    return p, False


@dataclass(frozen=True)
class ModelBounds:
    """A-priori sup bound on the value surface and Hamiltonian box width.

    u_bound = C_g + T (C_f + C_F); hamiltonian_box = sqrt(2d) u_bound + 1.
    """

    u_bound: float
    hamiltonian_box: float


def compute_bounds(model):
    u_bound = model.C_g + model.horizon * (model.C_f + model.C_F)
    return ModelBounds(u_bound, np.sqrt(2.0 * model.d) * u_bound + 1.0)


class Model:
    """Base class; subclasses fill in costs, Hamiltonian and selector."""

    name = "model"
    d = None
    horizon = None
    a_low = 0.0
    a_high = np.inf
    C_f = C_F = C_g = 0.0

    def running_cost(self, x, a):
        raise NotImplementedError

    def mean_field_cost(self, x, eta):
        raise NotImplementedError

    def terminal_cost(self, x, eta):
        raise NotImplementedError

    def hamiltonian(self, x, p, eta=None):
        raise NotImplementedError

    def selector(self, y, p, eta=None):
        raise NotImplementedError

    def selector_jacobian(self, y, p, eta=None):
        """d gamma_z / d p_w, shape (..., d, d); zero where nonsmooth."""
        p, single = _batched(p)
        J = np.zeros((p.shape[0], self.d, self.d))
        return J[0] if single else J

    def selector_state_jacobian(self, y, p, eta):
        """d gamma_z / d eta_w for selectors with direct measure dependence."""
        eta, single = _batched(eta)
        J = np.zeros((eta.shape[0], self.d, self.d))
        return J[0] if single else J

    def hbar(self, x, p, eta):
        """Full Hamiltonian including the mean-field cost."""
        return self.hamiltonian(x, p, eta) + self.mean_field_cost(x, eta)

    def hamiltonian_selector(self, y, p, eta=None):
        """Envelope derivative dH/dp: the exact minimizing rates.

        Identical to selector() unless the model smooths its selector,
        in which case H stays the exact min and its p-derivative must
        use the unsmoothed minimizer.
        """
        return self.selector(y, p, eta)

    def rate_matrix(self, u_values, eta):
        """Rate matrix with row y = selector(y, u - u_y); shape (..., d, d)."""
        u, single = _batched(u_values)
        eta_b, _ = _batched(eta)
        if eta_b.shape[0] == 1 and u.shape[0] > 1:
            eta_b = np.broadcast_to(eta_b, u.shape)
        Q = np.empty((u.shape[0], self.d, self.d))
        for y in range(self.d):
            Q[:, y, :] = self.selector(y, u - u[:, y : y + 1], eta_b)
        return Q[0] if single else Q

    def smoothed(self):
        """Trainer-facing variant; identical unless a model overrides it."""
        return self


class QuadraticModel(Model):
    """Quadratic transition costs with crowd-aversion mean-field cost.

    f(x,a) = b sum_{y != x} (a_y - 2)^2,  F(x,eta) = eta_x,  g = 0,
    rates constrained to [1, 3].  The closed-form selector is
    clamp(2 - p_y / (2b), 1, 3); the Hamiltonian is always evaluated at
    the clamped minimizer, which reduces to the interior closed form
    2 p_y - p_y^2/(4b) whenever |p_y| <= 2b.
    """

    name = "quadratic"
    a_low, a_high = 1.0, 3.0

    def __init__(self, d=2, b=4.0, horizon=0.5):
        if d < 1:
            raise ConfigError("quadratic model needs d >= 1")
        if b <= 0:
            raise ConfigError("quadratic model needs b > 0")
        if horizon > b:
            # T <= b guarantees the interior form of the Hamiltonian.
            raise ConfigError(f"horizon {horizon} exceeds b={b}")
        self.d = int(d)
        self.b = float(b)
        self.horizon = float(horizon)
        self.C_f = self.b * (self.d - 1)
        self.C_F = 1.0
        self.C_g = 0.0

    def running_cost(self, x, a):
        a = np.asarray(a, dtype=float)
        mask = np.arange(self.d) != x
        return self.b * float(np.sum((a[mask] - 2.0) ** 2))

    def mean_field_cost(self, x, eta):
        eta, single = _batched(eta)
        out = eta[:, x].copy()
        return float(out[0]) if single else out

    def terminal_cost(self, x, eta):
        eta, single = _batched(eta)
        return 0.0 if single else np.zeros(eta.shape[0])

    def _clamped_minimizer(self, x, p):
        a = np.clip(2.0 - p / (2.0 * self.b), self.a_low, self.a_high)
        a[:, x] = 0.0
        return a

    def selector(self, y, p, eta=None):
        p, single = _batched(p)
        rates = self._clamped_minimizer(y, p)
        rates[:, y] = -np.sum(rates, axis=1)
        return rates[0] if single else rates

    def selector_jacobian(self, y, p, eta=None):
        p, single = _batched(p)
        interior = (np.abs(p) < 2.0 * self.b).astype(float)
        interior[:, y] = 0.0
        J = np.zeros((p.shape[0], self.d, self.d))
        idx = np.arange(self.d)
        J[:, idx, idx] = -interior / (2.0 * self.b)
        J[:, y, :] = interior / (2.0 * self.b)
        return J[0] if single else J

    def hamiltonian(self, x, p, eta=None):
        p, single = _batched(p)
        a = self._clamped_minimizer(x, p)
        mask = np.arange(self.d) != x
        h = np.sum(self.b * (a[:, mask] - 2.0) ** 2 + a[:, mask] * p[:, mask], axis=1)
        return float(h[0]) if single else h


def quadratic_rate_selector(b, x, p, d=None, horizon=None):
    """Convenience wrapper: optimal rate vector of the quadratic model."""
    p = np.asarray(p, dtype=float)
    model = QuadraticModel(d=d or p.shape[-1], b=b, horizon=horizon or 0.0)
    return model.selector(x, p)


def quadratic_hamiltonian(b, x, p, d=None):
    p = np.asarray(p, dtype=float)
    model = QuadraticModel(d=d or p.shape[-1], b=b, horizon=0.0)
    return model.hamiltonian(x, p)


class CyberModel(Model):
    """Four-state defended/undefended x susceptible/infected network game.

    States are (DS, US, DI, UI).  The only control is the binary switch
    of the defended flag, taken at rate rho when switching strictly
    lowers the value (ties resolve to "do not switch").  Infection and
    recovery rates are exogenous; infections depend on the measure
    through the infected fractions.  F = g = 0.

    ``selector_tau`` > 0 replaces the switch indicator with a sigmoid of
    the value gap (temperature tau) for gradient-based training; the
    exact indicator stays in place when tau is None.
    """

    name = "cyber"
    d = 4
    a_low = 0.0

    def __init__(self, k_D=0.3, k_I=1.0, rho=0.8, v_H=0.6, qH_D=0.4, qH_U=0.6,
                 qR_D=0.5, qR_U=0.4, beta_DD=0.3, beta_UU=0.4, beta_UD=0.3,
                 beta_DU=0.4, horizon=1.0, selector_tau=None):
        params = dict(k_D=k_D, k_I=k_I, rho=rho, v_H=v_H, qH_D=qH_D, qH_U=qH_U,
                      qR_D=qR_D, qR_U=qR_U, beta_DD=beta_DD, beta_UU=beta_UU,
                      beta_UD=beta_UD, beta_DU=beta_DU)
        for key, val in params.items():
            if val < 0:
                raise ConfigError(f"cyber parameter {key} must be >= 0")
            setattr(self, key, float(val))
        self.horizon = float(horizon)
        self.selector_tau = selector_tau if selector_tau is None else float(selector_tau)
        self.C_f = self.k_D + self.k_I
        self.C_F = 0.0
        self.C_g = 0.0
        self.a_high = max(
            self.rho,
            self.qR_D,
            self.qR_U,
            self.v_H * self.qH_D + self.beta_DD + self.beta_UD,
            self.v_H * self.qH_U + self.beta_UU + self.beta_DU,
        )

    def smoothed(self, tau=None):
        """Copy with a sigmoid switch of temperature tau (default 0.05 k_I)."""
        if tau is None:
            tau = 0.05 * self.k_I if self.k_I > 0 else 0.05
        return CyberModel(self.k_D, self.k_I, self.rho, self.v_H, self.qH_D,
                          self.qH_U, self.qR_D, self.qR_U, self.beta_DD,
                          self.beta_UU, self.beta_UD, self.beta_DU,
                          self.horizon, selector_tau=tau)

    def running_cost(self, x, a):
        return self.k_D * (x in (DS, DI)) + self.k_I * (x in (DI, UI))

    def mean_field_cost(self, x, eta):
        eta, single = _batched(eta)
        return 0.0 if single else np.zeros(eta.shape[0])

    terminal_cost = mean_field_cost

    def infection_rates(self, eta):
        """(P_{DS->DI}, P_{US->UI}) as functions of the infected fractions."""
        eta, single = _batched(eta)
        p_d = self.v_H * self.qH_D + self.beta_DD * eta[:, DI] + self.beta_UD * eta[:, UI]
        p_u = self.v_H * self.qH_U + self.beta_UU * eta[:, UI] + self.beta_DU * eta[:, DI]
        if single:
            return float(p_d[0]), float(p_u[0])
        return p_d, p_u

    # Switch target state and extra (exogenous) transition per origin state.
    _SWITCH = {DS: US, US: DS, DI: UI, UI: DI}

    def _switch_rate(self, gap):
        """rho on a strictly negative value gap; sigmoid when smoothed."""
        if self.selector_tau is None:
            return self.rho * (gap < 0.0).astype(float)
        z = np.clip(-gap / self.selector_tau, -500.0, 500.0)
        return self.rho / (1.0 + np.exp(-z))

    def _switch_rate_grad(self, gap):
        if self.selector_tau is None:
            return np.zeros_like(gap)
        z = np.clip(-gap / self.selector_tau, -500.0, 500.0)
        s = 1.0 / (1.0 + np.exp(-z))
        return -self.rho * s * (1.0 - s) / self.selector_tau

    def selector(self, y, p, eta):
        p, single = _batched(p)
        eta_b, _ = _batched(eta)
        if eta_b.shape[0] == 1 and p.shape[0] > 1:
            eta_b = np.broadcast_to(eta_b, p.shape)
        p_d, p_u = self.infection_rates(eta_b)
        rates = np.zeros_like(p)
        tgt = self._SWITCH[y]
        rates[:, tgt] = self._switch_rate(p[:, tgt])
        if y == DS:
            rates[:, DI] = p_d
        elif y == US:
            rates[:, UI] = p_u
        elif y == DI:
            rates[:, DS] = self.qR_D
        else:
            rates[:, US] = self.qR_U
        rates[:, y] = 0.0
        rates[:, y] = -np.sum(rates, axis=1)
        return rates[0] if single else rates

    def selector_jacobian(self, y, p, eta=None):
        p, single = _batched(p)
        J = np.zeros((p.shape[0], self.d, self.d))
        tgt = self._SWITCH[y]
        g = self._switch_rate_grad(p[:, tgt])
        J[:, tgt, tgt] = g
        J[:, y, tgt] = -g
        return J[0] if single else J

    def selector_state_jacobian(self, y, p, eta):
        eta, single = _batched(eta)
        J = np.zeros((eta.shape[0], self.d, self.d))
        if y == DS:
            J[:, DI, DI] = self.beta_DD
            J[:, DI, UI] = self.beta_UD
        elif y == US:
            J[:, UI, UI] = self.beta_UU
            J[:, UI, DI] = self.beta_DU
        J[:, y, :] = -np.sum(J, axis=1)
        return J[0] if single else J

    def hamiltonian_selector(self, y, p, eta=None):
        if self.selector_tau is None:
            return self.selector(y, p, eta)
        exact = getattr(self, "_exact_twin", None)
        if exact is None:
            exact = CyberModel(self.k_D, self.k_I, self.rho, self.v_H,
                               self.qH_D, self.qH_U, self.qR_D, self.qR_U,
                               self.beta_DD, self.beta_UU, self.beta_UD,
                               self.beta_DU, self.horizon, selector_tau=None)
            self._exact_twin = exact
        return exact.selector(y, p, eta)

    def pre_hamiltonian(self, x, p, eta, a):
        """Value of the expression inside the Hamiltonian's min at action a."""
        p, single = _batched(p)
        eta_b, _ = _batched(eta)
        if eta_b.shape[0] == 1 and p.shape[0] > 1:
            eta_b = np.broadcast_to(eta_b, p.shape)
        p_d, p_u = self.infection_rates(eta_b)
        cost = self.running_cost(x, None)
        tgt = self._SWITCH[x]
        h = cost + self.rho * a * p[:, tgt]
        if x == DS:
            h = h + p_d * p[:, DI]
        elif x == US:
            h = h + p_u * p[:, UI]
        elif x == DI:
            h = h + self.qR_D * p[:, DS]
        else:
            h = h + self.qR_U * p[:, US]
        return float(h[0]) if single else h

    def hamiltonian(self, x, p, eta):
        h0 = self.pre_hamiltonian(x, p, eta, 0.0)
        h1 = self.pre_hamiltonian(x, p, eta, 1.0)
        return np.minimum(h0, h1)


class TrivialModel(Model):
    """All-zero costs with box-constrained rates; the solution is U = 0.

    f = F = g = 0 and rates in [rate_low, rate_high], so the Hamiltonian
    is sum_y min(rate_low p_y, rate_high p_y) and u = 0 solves the MFG
    system and the master equation exactly.  This is the end-to-end
    sanity check: every solver must return (near) zero.

    ``selector_tau`` smooths the bang-bang rate choice with a sigmoid of
    the price, mirroring the cybersecurity model's trainer variant.
    """

    name = "trivial"

    def __init__(self, d=2, horizon=0.5, rate_low=1.0, rate_high=3.0,
                 selector_tau=None):
        if d < 1:
            raise ConfigError("trivial model needs d >= 1")
        if not 0.0 <= rate_low <= rate_high:
            raise ConfigError("need 0 <= rate_low <= rate_high")
        self.d = int(d)
        self.horizon = float(horizon)
        self.a_low = float(rate_low)
        self.a_high = float(rate_high)
        self.selector_tau = selector_tau if selector_tau is None else float(selector_tau)
        self.C_f = self.C_F = self.C_g = 0.0

    def smoothed(self, tau=0.05):
        return TrivialModel(self.d, self.horizon, self.a_low, self.a_high,
                            selector_tau=tau)

    def running_cost(self, x, a):
        return 0.0

    def mean_field_cost(self, x, eta):
        eta, single = _batched(eta)
        return 0.0 if single else np.zeros(eta.shape[0])

    terminal_cost = mean_field_cost

    def _rates(self, p):
        if self.selector_tau is None:
            return np.where(p < 0.0, self.a_high, self.a_low)
        z = np.clip(-p / self.selector_tau, -500.0, 500.0)
        return self.a_low + (self.a_high - self.a_low) / (1.0 + np.exp(-z))

    def selector(self, y, p, eta=None):
        p, single = _batched(p)
        rates = self._rates(p)
        rates[:, y] = 0.0
        rates[:, y] = -np.sum(rates, axis=1)
        return rates[0] if single else rates

    def selector_jacobian(self, y, p, eta=None):
        p, single = _batched(p)
        J = np.zeros((p.shape[0], self.d, self.d))
        if self.selector_tau is not None:
            z = np.clip(-p / self.selector_tau, -500.0, 500.0)
            s = 1.0 / (1.0 + np.exp(-z))
            g = -(self.a_high - self.a_low) * s * (1.0 - s) / self.selector_tau
            g[:, y] = 0.0
            idx = np.arange(self.d)
            J[:, idx, idx] = g
            J[:, y, :] = -g
        return J[0] if single else J

    def hamiltonian_selector(self, y, p, eta=None):
        if self.selector_tau is None:
            return self.selector(y, p, eta)
        exact = TrivialModel(self.d, self.horizon, self.a_low, self.a_high)
        return exact.selector(y, p, eta)

    def hamiltonian(self, x, p, eta=None):
        p, single = _batched(p)
        mask = np.arange(self.d) != x
        h = np.sum(np.minimum(self.a_low * p[:, mask],
                              self.a_high * p[:, mask]), axis=1)
        return float(h[0]) if single else h


def cyber_rate_selector(params, x, p, eta):
    return params.selector(x, p, eta)


def cyber_pre_hamiltonian(params, x, p, eta, a):
    return params.pre_hamiltonian(x, p, eta, a)


_MODEL_BUILDERS = {}


def register_model(name, builder):
    """Register a config-file model builder: builder(**numeric_kwargs)."""
    _MODEL_BUILDERS[name] = builder


register_model("quadratic", QuadraticModel)
register_model("cyber", CyberModel)
register_model("trivial", TrivialModel)


def build_model(name, params):
    if name not in _MODEL_BUILDERS:
        raise ConfigError(
            f"unknown model {name!r}; known: {sorted(_MODEL_BUILDERS)}"
        )
    try:
        return _MODEL_BUILDERS[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for model {name!r}: {exc}") from exc
