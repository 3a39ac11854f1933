"""Feedforward value surfaces with exact manual backpropagation.

One network approximates U as a function of (state, measure) or
(time, state, measure).  Parameters live in a single flat float64 vector
with per-layer views, so optimizers and checkpoints treat the network as
a plain array.  Besides plain value/gradient evaluation, the class
provides the mixed second-order pass needed to differentiate a
directional input-derivative with respect to the parameters.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

CHECKPOINT_VERSION = 1


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ACTIVATIONS = {
    # name: (phi, phi', phi''), each taking the pre-activation z
    "sigmoid": (
        _sigmoid,
        lambda z: _sigmoid(z) * (1.0 - _sigmoid(z)),
        lambda z: _sigmoid(z) * (1.0 - _sigmoid(z)) * (1.0 - 2.0 * _sigmoid(z)),
    ),
    "tanh": (
        np.tanh,
        lambda z: 1.0 - np.tanh(z) ** 2,
        lambda z: -2.0 * np.tanh(z) * (1.0 - np.tanh(z) ** 2),
    ),
    # test-only, makes the network affine
    "identity": (
        lambda z: z,
        lambda z: np.ones_like(z),
        lambda z: np.zeros_like(z),
    ),
    "elu": (
        lambda z: np.where(z > 0, z, np.expm1(np.minimum(z, 0.0))),
        lambda z: np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0))),
        lambda z: np.where(z > 0, 0.0, np.exp(np.minimum(z, 0.0))),
    ),
}


@dataclass
class GradientBundle:
    """Derivatives of one forward evaluation (untruncated output)."""

    value: float
    d_params: np.ndarray
    d_inputs: np.ndarray


class NeuralSurface:
    """Fully-connected scalar-output network over (time?, state, measure).

    input layout: [t]? + state encoding + the d measure coordinates.
    The state enters either as the scalar value x+1 (paper layout) or
    one-hot, chosen by ``encoding``.  ``truncation_cap`` clips evaluation
    output from above; gradients always flow through the raw output.
    """

    def __init__(self, d_states, with_time, hidden=(60, 60, 60, 60),
                 activation="sigmoid", output_activation="identity",
                 encoding="scalar-state", truncation_cap=None, rng=None,
                 theta=None, lipschitz_bound=None):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if output_activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown output activation {output_activation!r}")
        if encoding not in ("scalar-state", "one-hot-state"):
            raise ConfigError(f"unknown state encoding {encoding!r}")
        self.d_states = int(d_states)
        self.with_time = bool(with_time)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.output_activation = output_activation
        self.encoding = encoding
        self.truncation_cap = truncation_cap
        self.lipschitz_bound = lipschitz_bound
        state_dim = 1 if encoding == "scalar-state" else self.d_states
        self.eta_offset = (1 if with_time else 0) + state_dim
        self.input_dim = self.eta_offset + self.d_states
        self.layer_sizes = [self.input_dim, *self.hidden, 1]

        self.n_params = sum(
            self.layer_sizes[i + 1] * self.layer_sizes[i] + self.layer_sizes[i + 1]
            for i in range(len(self.layer_sizes) - 1)
        )
        if theta is not None:
            theta = np.asarray(theta, dtype=float)
            if theta.shape != (self.n_params,):
                raise ConfigError("theta has the wrong length for this architecture")
            self.theta = theta.copy()
        else:
            self.theta = np.zeros(self.n_params)
        self._build_views()
        if theta is None:
            self.initialize(rng or np.random.default_rng(0))

    def _build_views(self):
        self.W, self.b = [], []
        off = 0
        for i in range(len(self.layer_sizes) - 1):
            n_in, n_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            self.W.append(self.theta[off:off + n_out * n_in].reshape(n_out, n_in))
            off += n_out * n_in
            self.b.append(self.theta[off:off + n_out])
            off += n_out

    def initialize(self, rng):
        """Glorot-uniform weights, zero biases."""
        for W, b in zip(self.W, self.b):
            s = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-s, s, size=W.shape)
            b[...] = 0.0

    def clone(self):
        return NeuralSurface(
            self.d_states, self.with_time, self.hidden, self.activation,
            self.output_activation, self.encoding, self.truncation_cap,
            theta=self.theta, lipschitz_bound=self.lipschitz_bound,
        )

    # ----- input packing -------------------------------------------------

    def pack_inputs(self, x, eta, t=None):
        """Build the network input batch from states and measures.

        x: int or (B,) ints; eta: (d,) or (B, d); t: scalar or (B,).
        """
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        B = eta.shape[0]
        x = np.broadcast_to(np.asarray(x, dtype=int), (B,))
        cols = []
        if self.with_time:
            if t is None:
                raise ValueError("this surface expects a time input")
            cols.append(np.broadcast_to(np.asarray(t, dtype=float), (B,))[:, None])
        if self.encoding == "scalar-state":
            cols.append((x + 1.0)[:, None])
        else:
            onehot = np.zeros((B, self.d_states))
            onehot[np.arange(B), x] = 1.0
            cols.append(onehot)
        cols.append(eta)
        return np.concatenate(cols, axis=1)

    # ----- forward / backward passes -------------------------------------

    def _phi(self):
        return _ACTIVATIONS[self.activation]

    def _psi(self):
        return _ACTIVATIONS[self.output_activation]

    def _forward_cached(self, X):
        phi, _, _ = self._phi()
        psi, _, _ = self._psi()
        a = X
        zs, acts = [], [X]
        for W, b in zip(self.W[:-1], self.b[:-1]):
            z = a @ W.T + b
            zs.append(z)
            a = phi(z)
            acts.append(a)
        pre = (a @ self.W[-1].T + self.b[-1])[:, 0]
        return psi(pre), pre, zs, acts

    def forward(self, X, truncate=True):
        """Values for an input batch, shape (B,)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ConfigError(
                f"input dimension {X.shape[1]} != expected {self.input_dim}"
            )
        out = self._forward_cached(X)[0]
        if truncate and self.truncation_cap is not None:
            out = np.minimum(out, self.truncation_cap)
        return out

    def value_and_input_grad(self, X):
        """Untruncated values and gradients w.r.t. every input coordinate."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out, pre, zs, acts = self._forward_cached(X)
        _, dphi, _ = self._phi()
        _, dpsi, _ = self._psi()
        ga = dpsi(pre)[:, None] * self.W[-1]
        for z, W in zip(reversed(zs), reversed(self.W[:-1])):
            gz = ga * dphi(z)
            ga = gz @ W
        return out, ga

    def backprop(self, X):
        """Values plus per-sample gradients in parameters and inputs.

        Returns (values (B,), d_params (B, n_params), d_inputs (B, n_in)),
        all for the untruncated output.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out, pre, zs, acts = self._forward_cached(X)
        _, dphi, _ = self._phi()
        _, dpsi, _ = self._psi()
        B = X.shape[0]
        d_params = np.empty((B, self.n_params))
        off = self.n_params
        gout = dpsi(pre)[:, None]  # (B, 1)
        # output layer
        n_out, n_in = self.W[-1].shape
        off -= n_out
        d_params[:, off:off + n_out] = gout
        offW = off - n_out * n_in
        d_params[:, offW:off] = (gout * acts[-1]).reshape(B, -1)
        off = offW
        ga = gout * self.W[-1]
        for li in range(len(self.W) - 2, -1, -1):
            gz = ga * dphi(zs[li])
            n_out, n_in = self.W[li].shape
            off -= n_out
            d_params[:, off:off + n_out] = gz
            offW = off - n_out * n_in
            d_params[:, offW:off] = np.einsum("bo,bi->boi", gz, acts[li]).reshape(B, -1)
            off = offW
            ga = gz @ self.W[li]
        return out, d_params, ga

    def directional_param_grad(self, X, V):
        """Mixed second-order pass for s = V . grad_x u.

        Returns (s (B,), ds/dtheta (B, n_params)) where V holds one input
        direction per sample.  This is what lets the trainers
        differentiate PDE residual terms (which contain input
        derivatives of the network) with respect to the parameters.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        phi, dphi, ddphi = self._phi()
        psi, dpsi, ddpsi = self._psi()
        B = X.shape[0]
        # forward with tangents
        a, ta = X, V
        zs, tzs, acts, tacts = [], [], [a], [ta]
        for W, b in zip(self.W[:-1], self.b[:-1]):
            z = a @ W.T + b
            tz = ta @ W.T
            a = phi(z)
            ta = dphi(z) * tz
            zs.append(z)
            tzs.append(tz)
            acts.append(a)
            tacts.append(ta)
        pre = (a @ self.W[-1].T + self.b[-1])[:, 0]
        tpre = (ta @ self.W[-1].T)[:, 0]
        s = dpsi(pre) * tpre
        # reverse pass with twin adjoint streams (value, tangent)
        d_params = np.empty((B, self.n_params))
        off = self.n_params
        gpre = (ddpsi(pre) * tpre)[:, None]
        gtpre = dpsi(pre)[:, None]
        n_out, n_in = self.W[-1].shape
        off -= n_out
        d_params[:, off:off + n_out] = gpre
        offW = off - n_out * n_in
        d_params[:, offW:off] = (gpre * acts[-1] + gtpre * tacts[-1]).reshape(B, -1)
        off = offW
        ga = gpre * self.W[-1]
        gt = gtpre * self.W[-1]
        for li in range(len(self.W) - 2, -1, -1):
            gz = ga * dphi(zs[li]) + gt * ddphi(zs[li]) * tzs[li]
            gtz = gt * dphi(zs[li])
            n_out, n_in = self.W[li].shape
            off -= n_out
            d_params[:, off:off + n_out] = gz
            offW = off - n_out * n_in
            d_params[:, offW:off] = (
                np.einsum("bo,bi->boi", gz, acts[li])
                + np.einsum("bo,bi->boi", gtz, tacts[li])
            ).reshape(B, -1)
            off = offW
            ga = gz @ self.W[li]
            gt = gtz @ self.W[li]
        return s, d_params

    # ----- checkpoints ----------------------------------------------------

    def save(self, path):
        header = {
            "format_version": CHECKPOINT_VERSION,
            "d_states": self.d_states,
            "with_time": self.with_time,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "output_activation": self.output_activation,
            "encoding": self.encoding,
            "truncation_cap": self.truncation_cap,
            "lipschitz_bound": self.lipschitz_bound,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(self.theta.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            raw = fh.read()
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError("unsupported checkpoint version")
        theta = np.frombuffer(raw, dtype="<f8")
        return cls(
            header["d_states"], header["with_time"], tuple(header["hidden"]),
            header["activation"], header["output_activation"],
            header["encoding"], header["truncation_cap"], theta=theta,
            lipschitz_bound=header.get("lipschitz_bound"),
        )


def spectral_norm(W, iters=50):
    """Operator 2-norm by power iteration (deterministic start vector)."""
    v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
    for _ in range(iters):
        w = W @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = W.T @ w
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(W @ v))


def project_lipschitz(net, bound, iters=50):
    """Rescale the first-layer weights so their 2-norm is at most bound.

    In-place; returns the network for chaining.
    """
    if bound <= 0:
        raise ConfigError("Lipschitz bound must be positive")
    sigma = spectral_norm(net.W[0], iters=iters)
    if sigma > bound:
        net.W[0][...] *= bound / sigma
    return net


# Thin single-input wrappers matching the operation-level contracts.

def evaluate(net, inp):
    return float(net.forward(np.asarray(inp, dtype=float)[None, :])[0])


def backprop(net, inp):
    val, d_params, d_inputs = net.backprop(np.asarray(inp, dtype=float)[None, :])
    return GradientBundle(float(val[0]), d_params[0], d_inputs[0])


def measure_derivative(net, inp, y, z):
    """Simplex derivative D^eta_{yz} of the surface at one input point."""
    if not (0 <= y < net.d_states and 0 <= z < net.d_states):
        raise ConfigError("measure-derivative states out of range")
    if y == z:
        return 0.0
    g = backprop(net, inp).d_inputs
    off = net.eta_offset
    return float(g[off + z] - g[off + y])
