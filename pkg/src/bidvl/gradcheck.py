"""Finite-difference check of every model gradient on small networks."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import nets
from . import tensor as T
from .config import TrainConfig
from .core import Models, build_models, ll_losses, ul_energy_loss
from .divergence import kl_to_standard_prior
from .errors import ContractError
from .nets import encode, generate
from .rng import Rng
from .tensor import Param, finite_diff, grad_of, rel_error

FD_STEP = 1e-4
TOLERANCE = 1e-5
# central differences are only meaningful this far from a ReLU or hinge kink
KINK_MARGIN = 1e-2
MAX_REDRAWS = 100


@dataclass
class GradCheckRow:
    seed: int
    loss: str
    param: str
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error <= TOLERANCE


def _losses(models: Models, data, eps, noise, cfg: TrainConfig) -> dict:
    """name -> (loss closure, params it trains)."""
    omega1 = models.encoder.params()
    omega2 = models.generator.params()
    psi = models.energy.params()

    def ll(name):
        return lambda: ll_losses(models, data, eps, noise, cfg)[name]

    def ul(mode):
        c = cfg.replace(energy_loss=mode)
        return lambda: ul_energy_loss(models, data, generate(models.generator, noise).detach(), c)[0]

    def posterior_prior():
        mu, lv = encode(models.encoder, generate(models.generator, noise).detach())
        return T.mean(kl_to_standard_prior(mu, lv))

    return {
        "weighted_recon": (ll("weighted_recon"), omega1 + omega2),
        "weighted_klprior": (ll("weighted_klprior"), omega1),
        "energy_chase": (ll("energy_chase"), omega2),
        "latent_cycle": (ll("latent_cycle"), omega1 + omega2),
        "ul_plain": (ul("plain"), psi),
        "ul_hinge": (ul("hinge"), psi),
        "posterior_prior_kl": (posterior_prior, omega1),
    }


def _fd_param(loss, p: Param, h: float) -> np.ndarray:
    orig = p.data.copy()

    def f(x):
        p.assign(x)
        return loss().item()

    try:
        return finite_diff(f, orig, h)
    finally:
        p.assign(orig)


@contextmanager
def _recording_relu(record: list[float]):
    plain = nets._ACTIVATIONS["relu"]

    def relu(x):
        record.append(float(np.abs(x.data).min()))
        return plain(x)

    nets._ACTIVATIONS["relu"] = relu
    try:
        yield
    finally:
        nets._ACTIVATIONS["relu"] = plain


def kink_distance(models: Models, data, eps, noise, cfg: TrainConfig) -> float:
    """Smallest distance of any ReLU input or hinge argument from its kink."""
    record: list[float] = []
    with _recording_relu(record):
        for loss, _ in _losses(models, data, eps, noise, cfg).values():
            loss()
        _, e_data, e_gen = ul_energy_loss(models, data, generate(models.generator, noise).detach(), cfg)
    record.append(float(np.abs(1.0 + e_data.data).min()))
    record.append(float(np.abs(1.0 - e_gen.data).min()))
    return min(record)


def check_seed(seed: int, hidden=(6, 6), batch: int = 5, d_v: int = 2, d_h: int = 2, ratio_mode: str = "sigmoid") -> list[GradCheckRow]:
    """Compare tape gradients with central differences for one random model.

    Biases are randomized because zero biases put every unit fed by an
    all-dead layer exactly on its ReLU kink. Points closer than
    ``KINK_MARGIN`` to any kink are redrawn.
    """
    models = build_models(d_v, d_h, seed, hidden)
    rng = Rng(seed, 99)
    cfg = TrainConfig(d_h=d_h, batch=batch, ratio_mode=ratio_mode, r_basic=0.5)
    for _ in range(MAX_REDRAWS):
        for p in models.energy.params() + models.encoder.params() + models.generator.params():
            if p.data.ndim == 1:
                p.assign(rng.uniform(p.shape, -0.5, 0.5))
        data = rng.uniform((batch, d_v), -0.9, 0.9)
        eps = rng.normal((batch, d_h))
        noise = rng.normal((batch, d_h))
        if kink_distance(models, data, eps, noise, cfg) > KINK_MARGIN:
            break
    else:
        raise ContractError(f"no kink-free test point after {MAX_REDRAWS} draws", "tensor-ad.gradcheck")
    rows = []
    for name, (loss, params) in _losses(models, data, eps, noise, cfg).items():
        analytic = grad_of(loss, params)
        for p, g in zip(params, analytic):
            numeric = _fd_param(loss, p, FD_STEP)
            rows.append(GradCheckRow(seed, name, p.name, rel_error(g, numeric)))
    return rows


def run_gradcheck(seeds: int = 10, base_seed: int = 0, hidden=(6, 6)) -> list[GradCheckRow]:
    rows = []
    for s in range(base_seed, base_seed + seeds):
        rows += check_seed(s, hidden)
    return rows
