"""Compact bi-level doubly variational training.

Three networks are trained by alternating updates:

* the marginal energy ``E(v)`` (upper level),
* the Gaussian posterior ``q(h|v)``, shared between the decoupled model
  ``p(v) q(h|v)`` and the lower-level variational posterior,
* the generator ``G`` that, fed with prior noise, forms the variational joint.

Lower level (variational parameters, energy frozen):

    r(v) * [λ |v - G(h~)|² + KL(q(h|v) || p(h))]      data-side weighted VAE term
    + E(G(h))                                          energy chase, generator only
    - log q(h | G(h))                                  latent cycle

Upper level (energy; and posterior in ``non-offset`` mode):

    mean E(v_data) - mean E(G(h))                      or the hinge-restricted form
    + KL(q(h|G(h)) || p(h))                            non-offset posterior update

In ``offset`` mode the opposite posterior terms of the two levels cancel: the
latent cycle only trains the generator and the upper level touches the energy
alone.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .divergence import importance_ratio, kl_to_standard_prior
from .errors import FormatError, NumericError, ShapeError
from .nets import (
    EnergyNet,
    GaussianEncoder,
    Generator,
    Prior,
    encode,
    energy,
    generate,
    init_params,
    log_prob_diag_gaussian,
    sample_posterior,
)
from .data import batches
from .rng import STREAM_BATCH, STREAM_INIT, STREAM_TRAIN, Rng
from .tensor import Param, Tape, Tensor

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (128, 128)
LL_TERMS = ("vae", "chase", "cycle")
METRIC_HEADER = (
    "iter",
    "weighted_recon",
    "weighted_klprior",
    "energy_chase",
    "latent_cycle",
    "ul_data_energy",
    "ul_model_energy",
)


@dataclass
class DecoupledEBLVM:
    energy: EnergyNet
    posterior: GaussianEncoder


@dataclass
class Models:
    energy: EnergyNet
    encoder: GaussianEncoder
    generator: Generator
    prior: Prior

    @property
    def eblvm(self) -> DecoupledEBLVM:
        return DecoupledEBLVM(self.energy, self.encoder)

    @property
    def d_v(self) -> int:
        return self.energy.d_v

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            **self.energy.named_arrays("energy"),
            **self.encoder.named_arrays("encoder"),
            **self.generator.named_arrays("generator"),
        }

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        self.energy.load_arrays("energy", arrays)
        self.encoder.load_arrays("encoder", arrays)
        self.generator.load_arrays("generator", arrays)


def build_models(d_v: int, d_h: int, seed: int, hidden=DEFAULT_HIDDEN, scheme: str = "kaiming-uniform") -> Models:
    seeds = Rng(seed, STREAM_INIT).integers(2**62, size=3)
    m = Models(
        energy=EnergyNet(d_v, hidden, sn=True),
        encoder=GaussianEncoder(d_v, d_h, hidden),
        generator=Generator(d_h, d_v, hidden),
        prior=Prior(d_h),
    )
    init_params(m.energy, int(seeds[0]), scheme)
    init_params(m.encoder, int(seeds[1]), scheme)
    init_params(m.generator, int(seeds[2]), scheme)
    return m


def models_from_arrays(arrays: dict[str, np.ndarray]) -> Models:
    """Rebuild models whose sizes are read off the checkpoint arrays."""
    try:
        n_energy = sum(1 for k in arrays if k.startswith("energy.") and k.endswith(".W"))
        hidden = tuple(arrays[f"energy.{i}.W"].shape[0] for i in range(n_energy - 1))
        d_v = arrays["energy.0.W"].shape[1]
        d_h = arrays["generator.0.W"].shape[1]
        m = build_models(d_v, d_h, 0, hidden)
        m.load(arrays)
    except (KeyError, IndexError, ShapeError) as e:
        raise FormatError(f"checkpoint does not describe a model: {e}", "data-io.load_checkpoint") from None
    return m


def load_models(path) -> tuple[int, Models]:
    iteration, arrays = load_checkpoint(path)
    return iteration, models_from_arrays(arrays)


@dataclass
class LossReport:
    weighted_recon: float = 0.0
    weighted_klprior: float = 0.0
    energy_chase: float = 0.0
    latent_cycle: float = 0.0
    ul_data_energy: float = 0.0
    ul_model_energy: float = 0.0

    @property
    def ll_total(self) -> float:
        return self.weighted_recon + self.weighted_klprior + self.energy_chase + self.latent_cycle

    def merge(self, other: "LossReport", fields_: Iterable[str]) -> "LossReport":
        for f in fields_:
            setattr(self, f, getattr(other, f))
        return self


def joint_energy(m: DecoupledEBLVM, v, h) -> Tensor:
    """Decoupled joint energy E(v) − log q(h|v)."""
    mu, lv = encode(m.posterior, v)
    return T.sub(energy(m.energy, v), log_prob_diag_gaussian(h, mu, lv))


def _checked(value: Tensor, name: str) -> float:
    x = value.item()
    if not np.isfinite(x):
        raise NumericError(f"non-finite {name}", "bidvl-core")
    return x


# ------------------------------------------------------------- lower level


def _vae_terms(models: Models, data: Tensor, eps, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    mu, lv = encode(models.encoder, data)
    h_tilde = sample_posterior(mu, lv, eps)
    recon = T.sum_(T.square(T.sub(data, generate(models.generator, h_tilde))), axis=1)
    kl = kl_to_standard_prior(mu, lv)
    if cfg.ratio.variant == "constant":
        e = np.zeros(len(data))  # constant weights ignore the energies
    else:
        e = energy(models.energy, data.detach()).data
    w = Tensor(importance_ratio(e, cfg.ratio))
    return T.mean(T.mul(w, T.scale(recon, cfg.lambda_rec))), T.mean(T.mul(w, kl))


def _chase_term(models: Models, noise) -> Tensor:
    return T.mean(energy(models.energy, generate(models.generator, noise)))


def _cycle_term(models: Models, noise) -> Tensor:
    noise = T.as_tensor(noise)
    mu, lv = encode(models.encoder, generate(models.generator, noise))
    return T.neg(T.mean(log_prob_diag_gaussian(noise, mu, lv)))


def ll_losses(models: Models, data, eps, noise, cfg: TrainConfig) -> dict[str, Tensor]:
    """Forward pass of the four lower-level components."""
    recon, kl = _vae_terms(models, T.as_tensor(data), eps, cfg)
    return {
        "weighted_recon": recon,
        "weighted_klprior": kl,
        "energy_chase": _chase_term(models, noise),
        "latent_cycle": _cycle_term(models, noise),
    }


def ll_step(models: Models, data, eps, noise, cfg: TrainConfig, terms: Iterable[str] = LL_TERMS) -> LossReport:
    """Accumulate lower-level gradients into the encoder and generator.

    The energy network is frozen. In offset mode the latent-cycle term only
    reaches the generator.
    """
    terms = set(terms)
    omega1 = models.encoder.params()
    omega2 = models.generator.params()
    rep = LossReport()
    parts = []
    with Tape() as tape:
        if "vae" in terms:
            recon, kl = _vae_terms(models, T.as_tensor(data), eps, cfg)
            rep.weighted_recon = _checked(recon, "weighted_recon")
            rep.weighted_klprior = _checked(kl, "weighted_klprior")
            parts += [recon, kl]
        if "chase" in terms:
            chase = _chase_term(models, noise)
            rep.energy_chase = _checked(chase, "energy_chase")
            parts.append(chase)
        if parts:
            total = parts[0]
            for p in parts[1:]:
                total = T.add(total, p)
            tape.backward(total, omega1 + omega2)
    if "cycle" in terms:
        with Tape() as tape:
            cycle = _cycle_term(models, noise)
            rep.latent_cycle = _checked(cycle, "latent_cycle")
            tape.backward(cycle, omega2 if cfg.grad_mode == "offset" else omega1 + omega2)
    return rep


# ------------------------------------------------------------- upper level


def ul_energy_loss(models: Models, data, v_gen, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    e_data = energy(models.energy, data)
    e_gen = energy(models.energy, v_gen)
    if cfg.energy_loss == "hinge":
        loss = T.add(T.mean(T.relu(T.add(e_data, 1.0))), T.mean(T.relu(T.sub(1.0, e_gen))))
    else:
        loss = T.sub(T.mean(e_data), T.mean(e_gen))
    return loss, e_data, e_gen


def ul_step(models: Models, data, noise, cfg: TrainConfig) -> LossReport:
    """Accumulate upper-level gradients into the energy (and posterior in non-offset mode).

    Generated samples enter as constants.
    """
    v_gen = generate(models.generator, noise).detach()
    rep = LossReport()
    with Tape() as tape:
        loss, e_data, e_gen = ul_energy_loss(models, data, v_gen, cfg)
        _checked(loss, "upper-level energy loss")
        tape.backward(loss, models.energy.params())
    rep.ul_data_energy = float(e_data.data.mean())
    rep.ul_model_energy = float(e_gen.data.mean())
    if cfg.grad_mode == "non-offset":
        with Tape() as tape:
            mu, lv = encode(models.encoder, v_gen)
            kl = T.mean(kl_to_standard_prior(mu, lv))
            _checked(kl, "posterior prior KL")
            tape.backward(kl, models.encoder.params())
    return rep


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    s: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(state: AdamState, params: list[Param], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update from ``p.grad``; gradients are zeroed afterwards."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.s = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.s[i] = b2 * state.s[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        s_hat = state.s[i] / c2
        p.assign(p.data - lr * m_hat / (np.sqrt(s_hat) + eps))
        p.zero_grad()


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    models: Models
    rows: list[dict]
    checkpoints: list[tuple[int, dict[str, np.ndarray]]]


def train(
    cfg: TrainConfig,
    dataset: np.ndarray,
    out_dir=None,
    hidden=DEFAULT_HIDDEN,
    on_checkpoint: Callable[[int, Models], None] | None = None,
    keep_checkpoints: bool = False,
) -> TrainResult:
    """Alternating stochastic gradient descent over the two levels.

    Writes ``metrics.csv`` and ``ckpt_<iter>.bdvl`` files to ``out_dir`` when
    given. A numeric failure aborts the run; checkpoints already written are
    left untouched.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise NumericError("empty dataset", "bidvl-core.train")
    d_v = dataset.shape[1]
    models = build_models(d_v, cfg.d_h, cfg.seed, hidden)
    rng = Rng(cfg.seed, STREAM_TRAIN)
    it_batches = batches(dataset, cfg.batch, Rng(cfg.seed, STREAM_BATCH).integers(2**62))
    omega = models.encoder.params() + models.generator.params()
    psi = models.energy.params()
    opt_ll, opt_energy, opt_post = AdamState(), AdamState(), AdamState()
    betas, aeps = cfg.adam_betas, cfg.adam_eps

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_HEADER)

    rows: list[dict] = []
    kept: list[tuple[int, dict]] = []

    def checkpoint(it: int) -> None:
        arrays = {k: np.array(v) for k, v in models.arrays().items()}
        if out is not None:
            save_checkpoint(out / f"ckpt_{it:07d}.bdvl", arrays, it)
        if keep_checkpoints:
            kept.append((it, arrays))
        if on_checkpoint is not None:
            on_checkpoint(it, models)

    try:
        checkpoint(0)
        for it in range(1, cfg.max_iters + 1):
            v = next(it_batches)
            rep = LossReport()
            for _ in range(cfg.n_ll_steps):
                eps = rng.normal((cfg.batch, cfg.d_h))
                noise = models.prior.sample(rng, cfg.batch)
                rep.merge(ll_step(models, v, eps, noise, cfg), LL_FIELDS)
                adam_step(opt_ll, omega, cfg.lr_var, betas, aeps)
            models.energy.power_iterate(1)
            noise = models.prior.sample(rng, cfg.batch)
            rep.merge(ul_step(models, v, noise, cfg), UL_FIELDS)
            adam_step(opt_energy, psi, cfg.lr_energy, betas, aeps)
            if cfg.grad_mode == "non-offset":
                adam_step(opt_post, models.encoder.params(), cfg.lr_var, betas, aeps)
            row = {"iter": it, **asdict(rep)}
            rows.append(row)
            if writer is not None:
                writer.writerow([it] + [repr(float(row[k])) for k in METRIC_HEADER[1:]])
            if it % cfg.eval_every == 0 or it == cfg.max_iters:
                checkpoint(it)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(models, rows, kept)


LL_FIELDS = ("weighted_recon", "weighted_klprior", "energy_chase", "latent_cycle")
UL_FIELDS = ("ul_data_energy", "ul_model_energy")
