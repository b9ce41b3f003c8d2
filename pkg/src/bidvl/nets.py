"""MLP building blocks: energy network, Gaussian encoder, generator.

All three are plain parameter containers; forward passes are free functions
(:func:`energy`, :func:`encode`, :func:`generate`) so they compose with the
tape in :mod:`bidvl.tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Param, Tensor

LOG_2PI = math.log(2.0 * math.pi)
RAWLV_CLAMP = 20.0

_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "softplus": T.softplus, "sigmoid": T.sigmoid}


class LinearLayer:
    """y = x Wᵀ + b, optionally with W divided by its spectral norm estimate.

    ``u`` and ``v_vec`` are the power-iteration vectors. In the forward pass
    the norm is recomputed as ``uᵀ W v`` on the tape with ``u, v`` held
    constant, so gradients see the normalization.
    """

    def __init__(self, n_in: int, n_out: int, sn: bool = False, name: str = ""):
        self.n_in, self.n_out = n_in, n_out
        self.W = Param(np.zeros((n_out, n_in)), name=f"{name}.W")
        self.b = Param(np.zeros(n_out), name=f"{name}.b")
        self.sn = sn
        self.u = np.zeros(n_out)
        self.v_vec = np.zeros(n_in)
        self.sigma = 0.0
        self.degenerate = True  # no estimate until spectral_normalize runs
        self.name = name

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def reset_sn(self, rng: Rng) -> None:
        v = rng.normal(self.n_in)
        self.v_vec = v / np.linalg.norm(v)
        u = rng.normal(self.n_out)
        self.u = u / np.linalg.norm(u)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"layer {self.name!r} expects width {self.n_in}, got {x.shape}", "nets.forward")
        y = T.matmul(x, T.transpose(self.W))
        if self.sn and not self.degenerate:
            wv = T.matmul(self.W, Tensor(self.v_vec[:, None]))
            sigma = T.reshape(T.matmul(Tensor(self.u[None, :]), wv), ())
            # a stale estimate can vanish after W is edited; treat as degenerate
            if sigma.item() > 0.0:
                y = T.mul(y, T.reciprocal(sigma))
        return T.bias_add(y, self.b)


def spectral_normalize(layer: LinearLayer, n_iters: int = 1) -> float:
    """Run ``n_iters`` power iterations on ``layer.W``; return σ̂ = uᵀWv.

    A zero matrix sets ``layer.degenerate`` and the layer then applies W
    unscaled.
    """
    if n_iters < 1:
        raise ConfigError("n_iters must be >= 1", "nets.spectral_normalize")
    W = layer.W.data
    u, v = layer.u, layer.v_vec
    if not np.any(v):
        v = np.ones(layer.n_in) / math.sqrt(layer.n_in)
    for _ in range(n_iters):
        wv = W @ v
        nu = np.linalg.norm(wv)
        if nu == 0.0:
            layer.degenerate = True
            layer.sigma = 0.0
            return 0.0
        u = wv / nu
        wtu = W.T @ u
        nv = np.linalg.norm(wtu)
        if nv == 0.0:
            layer.degenerate = True
            layer.sigma = 0.0
            return 0.0
        v = wtu / nv
    layer.u, layer.v_vec = u, v
    layer.sigma = float(u @ W @ v)
    layer.degenerate = layer.sigma <= 0.0
    return layer.sigma


class Module:
    layers: list[LinearLayer]

    def all_layers(self) -> list[LinearLayer]:
        return list(self.layers)

    def params(self) -> list[Param]:
        return [p for layer in self.all_layers() for p in layer.params()]

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters plus spectral-norm vectors, keyed for checkpoints."""
        out = {}
        for i, layer in enumerate(self.all_layers()):
            out[f"{prefix}.{i}.W"] = layer.W.data
            out[f"{prefix}.{i}.b"] = layer.b.data
            if layer.sn:
                out[f"{prefix}.{i}.u"] = layer.u
                out[f"{prefix}.{i}.v"] = layer.v_vec
        return out

    def load_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.all_layers()):
            layer.W.assign(arrays[f"{prefix}.{i}.W"])
            layer.b.assign(arrays[f"{prefix}.{i}.b"])
            if layer.sn:
                layer.u = np.array(arrays[f"{prefix}.{i}.u"])
                layer.v_vec = np.array(arrays[f"{prefix}.{i}.v"])
                layer.sigma = float(layer.u @ layer.W.data @ layer.v_vec)
                layer.degenerate = layer.sigma <= 0.0

    def power_iterate(self, n_iters: int = 1) -> None:
        for layer in self.all_layers():
            if layer.sn:
                spectral_normalize(layer, n_iters)

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def _stack(sizes: list[int], sn: bool, name: str) -> list[LinearLayer]:
    return [LinearLayer(a, b, sn=sn, name=f"{name}{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]


class EnergyNet(Module):
    """Scalar marginal energy; no output nonlinearity."""

    def __init__(self, d_v: int, widths=(128, 128), activation: str = "relu", sn: bool = True):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}", "nets.EnergyNet")
        self.d_v = d_v
        self.activation = activation
        self.layers = _stack([d_v, *widths, 1], sn, "energy")


class GaussianEncoder(Module):
    def __init__(self, d_v: int, d_h: int, widths=(128, 128), activation: str = "relu", sn: bool = False):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}", "nets.GaussianEncoder")
        self.d_v, self.d_h = d_v, d_h
        self.activation = activation
        self.trunk = _stack([d_v, *widths], sn, "enc")
        last = widths[-1] if widths else d_v
        self.head_mu = LinearLayer(last, d_h, sn=sn, name="enc_mu")
        self.head_rawlv = LinearLayer(last, d_h, sn=sn, name="enc_lv")

    def all_layers(self):
        return [*self.trunk, self.head_mu, self.head_rawlv]


class Generator(Module):
    """Deterministic map from latent prior samples to (−1, 1)^d_v."""

    def __init__(self, d_h: int, d_v: int, widths=(128, 128), activation: str = "relu", sn: bool = False):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}", "nets.Generator")
        self.d_h, self.d_v = d_h, d_v
        self.activation = activation
        self.layers = _stack([d_h, *widths, d_v], sn, "gen")


@dataclass
class Prior:
    dim: int

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        return rng.normal((n, self.dim))


# ------------------------------------------------------------------ forward


def _mlp(layers: list[LinearLayer], x: Tensor, act) -> Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = act(x)
    return x


def energy(net: EnergyNet, v) -> Tensor:
    v = T.as_tensor(v)
    if v.data.ndim != 2 or v.shape[1] != net.d_v:
        raise ShapeError(f"energy expects [batch×{net.d_v}], got {v.shape}", "nets.energy")
    out = _mlp(net.layers, v, _ACTIVATIONS[net.activation])
    return T.reshape(out, (v.shape[0],))


def encode(enc: GaussianEncoder, v) -> tuple[Tensor, Tensor]:
    """Posterior mean and log-variance; log-variance is −softplus(raw) ≤ 0."""
    v = T.as_tensor(v)
    if v.data.ndim != 2 or v.shape[1] != enc.d_v:
        raise ShapeError(f"encode expects [batch×{enc.d_v}], got {v.shape}", "nets.encode")
    act = _ACTIVATIONS[enc.activation]
    x = v
    for layer in enc.trunk:
        x = act(layer(x))
    mu = enc.head_mu(x)
    raw = T.clamp(enc.head_rawlv(x), -RAWLV_CLAMP, RAWLV_CLAMP)
    return mu, T.neg(T.softplus(raw))


def sample_posterior(mu, logvar, eps) -> Tensor:
    """Reparameterized draw h = mu + exp(logvar / 2) * eps."""
    mu, logvar, eps = T.as_tensor(mu), T.as_tensor(logvar), T.as_tensor(eps)
    if not mu.shape == logvar.shape == eps.shape:
        raise ShapeError(f"shapes {mu.shape}, {logvar.shape}, {eps.shape} disagree", "nets.sample_posterior")
    return T.add(mu, T.mul(T.exp(T.scale(logvar, 0.5)), eps))


def generate(gen: Generator, h) -> Tensor:
    h = T.as_tensor(h)
    if h.data.ndim != 2 or h.shape[1] != gen.d_h:
        raise ShapeError(f"generate expects [batch×{gen.d_h}], got {h.shape}", "nets.generate")
    return T.tanh(_mlp(gen.layers, h, _ACTIVATIONS[gen.activation]))


def log_prob_diag_gaussian(h, mu, logvar) -> Tensor:
    """Per-row log density of a diagonal Gaussian."""
    h, mu, logvar = T.as_tensor(h), T.as_tensor(mu), T.as_tensor(logvar)
    if not h.shape == mu.shape == logvar.shape:
        raise ShapeError(f"shapes {h.shape}, {mu.shape}, {logvar.shape} disagree", "nets.log_prob_diag_gaussian")
    quad = T.mul(T.square(T.sub(h, mu)), T.exp(T.neg(logvar)))
    per = T.add(T.scale(T.add(logvar, quad), -0.5), -0.5 * LOG_2PI)
    return T.sum_(per, axis=-1)


# --------------------------------------------------------------------- init


def init_params(net: Module, seed: int, scheme: str = "kaiming-uniform", sn_iters: int = 50) -> Module:
    """Fan-based uniform weights, zero biases, fresh spectral-norm vectors."""
    if scheme not in ("kaiming-uniform", "xavier-uniform"):
        raise ConfigError(f"unknown init scheme {scheme!r}", "nets.init_params")
    rng = Rng(seed)
    for layer in net.all_layers():
        fan_in, fan_out = layer.n_in, layer.n_out
        if scheme == "kaiming-uniform":
            bound = math.sqrt(6.0 / fan_in)
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        layer.W.assign(rng.uniform((fan_out, fan_in), -bound, bound))
        layer.b.assign(np.zeros(fan_out))
        layer.W.zero_grad()
        layer.b.zero_grad()
        layer.reset_sn(rng)
        layer.degenerate = False
        if layer.sn:
            spectral_normalize(layer, sn_iters)
    return net
