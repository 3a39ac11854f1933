import numpy as np
import pytest

from mfgmaster.dgme import (
    DgmeConfig, dgme_batch_loss, dgme_point_loss, dgme_residual,
    dgme_residual_terms, _weighted_gradient,
)
from mfgmaster.errors import ConfigError
from mfgmaster.models import CyberModel, QuadraticModel
from mfgmaster.nets import NeuralSurface


def zero_net(d, hidden=(8, 8)):
    net = NeuralSurface(d, with_time=True, hidden=hidden, activation="tanh")
    net.theta[:] = 0.0
    return net


def small_net(d, seed=0, hidden=(8, 8)):
    net = NeuralSurface(d, with_time=True, hidden=hidden, activation="tanh")
    net.initialize(np.random.default_rng(seed))
    return net


def test_zero_net_residual_is_mean_field_cost():
    # A constant-zero surface has no time or measure derivatives and
    # p = 0, so the residual reduces to Hbar(x, 0, eta) = eta_x for the
    # quadratic model.
    m = QuadraticModel(d=2)
    net = zero_net(2)
    eta = np.array([[0.3, 0.7]])
    for x in (0, 1):
        r = dgme_residual(net, m, 0.2, x, eta[0])
        assert abs(r - eta[0, x]) < 1e-14


def test_zero_net_point_loss_includes_terminal():
    m = QuadraticModel(d=2)
    net = zero_net(2)
    eta = np.array([0.3, 0.7])
    # terminal cost is zero, so the loss is just |residual|
    assert dgme_point_loss(net, m, 0.1, 0, eta) == pytest.approx(0.3)


def test_residual_terms_shapes():
    m = QuadraticModel(d=3)
    net = small_net(3)
    B = 5
    rng = np.random.default_rng(1)
    t = rng.uniform(0, m.horizon, B)
    x = rng.integers(0, 3, B)
    eta = rng.dirichlet(np.ones(3), B)
    r, term, aux = dgme_residual_terms(net, m, t, x, eta)
    assert r.shape == (B,)
    assert term.shape == (B,)
    assert aux["u"].shape == (B, 3)


def test_batch_loss_lse_upper_bounds_max():
    m = QuadraticModel(d=2)
    net = small_net(2, seed=2)
    rng = np.random.default_rng(3)
    B = 16
    t = rng.uniform(0, m.horizon, B)
    x = rng.integers(0, 2, B)
    eta = rng.dirichlet(np.ones(2), B)
    hard = dgme_batch_loss(net, m, t, x, eta, temperature=None)
    tau = 0.05
    soft = dgme_batch_loss(net, m, t, x, eta, temperature=tau)
    assert hard <= soft <= hard + tau * np.log(B) + 1e-12


@pytest.mark.parametrize("model", [QuadraticModel(d=2), QuadraticModel(d=3),
                                   CyberModel().smoothed()])
def test_weighted_gradient_matches_fd(model):
    net = small_net(model.d, seed=4)
    rng = np.random.default_rng(5)
    B = 4
    t = rng.uniform(0, model.horizon, B)
    x = rng.integers(0, model.d, B)
    eta = rng.dirichlet(np.ones(model.d), B)
    coef_r = rng.standard_normal(B)
    coef_b = rng.standard_normal(B)

    def objective():
        r, term, _ = dgme_residual_terms(net, model, t, x, eta)
        return float(coef_r @ r + coef_b @ term)

    _, _, aux = dgme_residual_terms(net, model, t, x, eta)
    g = _weighted_gradient(net, model, t, x, eta, aux, coef_r, coef_b)
    h = 1e-6
    for k in rng.choice(net.theta.size, 20, replace=False):
        theta0 = net.theta[k]
        net.theta[k] = theta0 + h
        up = objective()
        net.theta[k] = theta0 - h
        dn = objective()
        net.theta[k] = theta0
        fd = (up - dn) / (2 * h)
        assert abs(g[k] - fd) < 1e-6 * max(1.0, abs(fd))


def test_config_validation():
    cfg = DgmeConfig(warmup_iterations=-1)
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = DgmeConfig(finetune_topk=0)
    with pytest.raises(ConfigError):
        cfg.validate()
    DgmeConfig().validate()
