"""Reconstruction, OOD scoring, sample quality and landscape export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EIGHT_STD
from .divergence import KernelSpec, mmd2_rbf
from .errors import ContractError, ShapeError, UnsupportedError
from .nets import encode, energy, generate

MODE_MASS_THRESHOLD = 0.02
MODE_RADIUS = 3.0 * EIGHT_STD


@dataclass
class EvalReport:
    mmd2: float = float("nan")
    rmse: float = float("nan")
    auroc_per_ood_set: dict[str, float] = field(default_factory=dict)
    modes_covered: int = 0
    per_mode_mass: np.ndarray = field(default_factory=lambda: np.zeros(0))
    checkpoint_iter: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        if self.checkpoint_iter is not None:
            w.writerow(["checkpoint_iter", self.checkpoint_iter])
        w.writerow(["mmd2", repr(self.mmd2)])
        w.writerow(["rmse", repr(self.rmse)])
        for name, a in sorted(self.auroc_per_ood_set.items()):
            w.writerow([f"auroc_{name}", repr(a)])
        w.writerow(["modes_covered", self.modes_covered])
        for i, m in enumerate(self.per_mode_mass):
            w.writerow([f"mode_mass_{i}", repr(float(m))])
        return buf.getvalue()


def rmse(x, xhat) -> float:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"shapes {x.shape} and {xhat.shape} differ", "eval-harness.rmse")
    return float(np.sqrt(np.mean((x - xhat) ** 2)))


def reconstruct(models, x, chunk: int = 4096) -> np.ndarray:
    """G(mean of q(h|x)); no sampling."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for i in range(0, len(x), chunk):
        mu, _ = encode(models.encoder, x[i : i + chunk])
        out.append(generate(models.generator, mu).data)
    return np.concatenate(out) if out else np.zeros_like(x)


def recon_pass(models, test_set) -> tuple[np.ndarray, float]:
    xhat = reconstruct(models, test_set)
    return xhat, rmse(test_set, xhat)


def energies(models, x, chunk: int = 4096) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([energy(models.energy, x[i : i + chunk]).data for i in range(0, len(x), chunk)])


def auroc(scores_in, scores_out) -> float:
    """P(score_in > score_out) over all pairs, ties counted as one half."""
    a = np.asarray(scores_in, dtype=np.float64).ravel()
    b = np.sort(np.asarray(scores_out, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ContractError("auroc needs nonempty score sets", "eval-harness.auroc")
    below = np.searchsorted(b, a, side="left")
    upto = np.searchsorted(b, a, side="right")
    wins = below.sum() + 0.5 * (upto - below).sum()
    return float(wins / (a.size * b.size))


def ood_report(models, in_set, ood_sets: dict[str, np.ndarray]) -> dict[str, float]:
    """AUROC of the negative marginal energy for each OOD set."""
    s_in = -energies(models, in_set)
    return {name: auroc(s_in, -energies(models, x)) for name, x in ood_sets.items()}


def mode_coverage(samples, centers, radius: float, threshold: float = MODE_MASS_THRESHOLD) -> tuple[int, np.ndarray]:
    samples = np.asarray(samples, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) == 0:
        raise ContractError("no centers given", "eval-harness.mode_coverage")
    if len(samples) == 0 or radius <= 0:
        return 0, np.zeros(len(centers))
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    nearest = d2.argmin(1)
    inside = d2[np.arange(len(samples)), nearest] <= radius * radius
    mass = np.bincount(nearest[inside], minlength=len(centers)) / len(samples)
    return int((mass >= threshold).sum()), mass


def sample(models, rng, n: int) -> np.ndarray:
    h = models.prior.sample(rng, n)
    return generate(models.generator, h).data


def sample_mmd(samples, heldout, k: KernelSpec = KernelSpec()) -> float:
    return mmd2_rbf(samples, heldout, k)


def energy_grid(models, bounds=(-1.0, 1.0, -1.0, 1.0), resolution: int = 64) -> np.ndarray:
    """Energies on a resolution×resolution grid; row i is y_i, column j is x_j."""
    if models.energy.d_v != 2:
        raise UnsupportedError("energy_grid needs 2-D data", "eval-harness.energy_grid")
    if resolution < 2:
        raise ContractError("resolution must be >= 2", "eval-harness.energy_grid")
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return energies(models, pts).reshape(resolution, resolution)


def to_pgm(grid: np.ndarray) -> bytes:
    """Binary 8-bit PGM, min-max normalized; a flat field maps to 0."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi > lo:
        px = np.round(255.0 * (g - lo) / (hi - lo)).astype(np.uint8)
    else:
        px = np.zeros(g.shape, dtype=np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_grid(path_stem, grid: np.ndarray) -> None:
    stem = Path(path_stem)
    np.savetxt(stem.with_suffix(".csv"), grid, delimiter=",", fmt="%.17g")
    stem.with_suffix(".pgm").write_bytes(to_pgm(grid))


def write_samples_csv(path, samples: np.ndarray) -> None:
    np.savetxt(path, samples, delimiter=",", fmt="%.17g")


def full_report(models, heldout, rng, centers=None, n_samples: int = 4096, mode_radius: float = MODE_RADIUS) -> tuple[EvalReport, np.ndarray]:
    """All metrics for one set of models; returns the report and the samples drawn.

    ``rng`` supplies generator noise and the uniform-box OOD set. Mode
    coverage is computed only when ``centers`` is given.
    """
    heldout = np.asarray(heldout, dtype=np.float64)
    samples = sample(models, rng, n_samples)
    noise = rng.uniform((len(heldout), heldout.shape[1]), -1.0, 1.0)
    rep = EvalReport(
        mmd2=sample_mmd(samples, heldout),
        rmse=recon_pass(models, heldout)[1],
        auroc_per_ood_set=ood_report(models, heldout, {"uniform": noise}),
    )
    if centers is not None:
        rep.modes_covered, rep.per_mode_mass = mode_coverage(samples, centers, mode_radius)
    return rep, samples
