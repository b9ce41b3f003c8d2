"""Synthetic 2-D datasets, IDX raster ingestion and minibatching.

Every generator returns samples inside the [-1, 1] box, matching the
preprocessing applied to image data.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .rng import STREAM_HELDOUT, Rng

KINDS = ("eight_gaussians", "two_rings", "checkerboard", "two_moons", "swiss_roll", "idx_images")

EIGHT_RADIUS = 0.8
EIGHT_STD = 0.05


@dataclass
class DatasetSpec:
    kind: str = "eight_gaussians"
    n: int = 50_000
    seed: int = 0
    params: dict = field(default_factory=dict)


def eight_gaussian_centers(radius: float = EIGHT_RADIUS, modes: int = 8) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _eight_gaussians(rng: Rng, n: int, radius=EIGHT_RADIUS, std=EIGHT_STD, modes=8) -> np.ndarray:
    centers = eight_gaussian_centers(radius, modes)
    k = rng.integers(modes, size=n)
    return centers[k] + std * rng.normal((n, 2))


def _two_rings(rng: Rng, n: int, radii=(0.4, 0.8), std=0.03) -> np.ndarray:
    which = rng.integers(2, size=n)
    r = np.asarray(radii)[which] + std * rng.normal(n)
    t = rng.uniform(n, 0.0, 2.0 * np.pi)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _checkerboard(rng: Rng, n: int, cells=4) -> np.ndarray:
    # uniform over the "black" squares of a cells×cells board on [-1, 1]²
    black = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
    pick = np.asarray(black)[rng.integers(len(black), size=n)]
    width = 2.0 / cells
    offs = rng.uniform((n, 2))
    return -1.0 + width * (pick + offs)


def _two_moons(rng: Rng, n: int, std=0.05) -> np.ndarray:
    upper = rng.integers(2, size=n).astype(bool)
    t = rng.uniform(n, 0.0, np.pi)
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1)
    pts = (pts - np.array([0.5, 0.25])) * 0.6
    return pts + std * rng.normal((n, 2))


def _swiss_roll(rng: Rng, n: int, std=0.02) -> np.ndarray:
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(n))
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 15.0
    return pts + std * rng.normal((n, 2))


_GENERATORS = {
    "eight_gaussians": _eight_gaussians,
    "two_rings": _two_rings,
    "checkerboard": _checkerboard,
    "two_moons": _two_moons,
    "swiss_roll": _swiss_roll,
}


def make_dataset(spec: DatasetSpec) -> np.ndarray:
    if spec.kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {spec.kind!r}", "data-io.make_dataset")
    if spec.n < 1:
        raise ConfigError("dataset size must be >= 1", "data-io.make_dataset")
    if spec.kind == "idx_images":
        if "path" not in spec.params:
            raise ConfigError("idx_images needs params['path']", "data-io.make_dataset")
        return load_idx_images(spec.params["path"])[: spec.n]
    rng = Rng(spec.seed)
    x = _GENERATORS[spec.kind](rng, spec.n, **{k: v for k, v in spec.params.items()})
    return np.clip(x, -1.0, 1.0)


def make_heldout(spec: DatasetSpec, n: int = 4096) -> np.ndarray:
    """Fresh samples of the same family from an independent stream."""
    if spec.kind == "idx_images":
        return make_dataset(spec)[-n:]
    seed = int(Rng(spec.seed, STREAM_HELDOUT).integers(2**62))
    return make_dataset(DatasetSpec(spec.kind, n, seed, dict(spec.params)))


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 unsigned-byte file and scale pixels to [-1, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"IDX header needs 16 bytes, file has {len(raw)}", "data-io.load_idx_images")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x00000803", "data-io.load_idx_images")
    expected = n * rows * cols
    actual = len(raw) - 16
    if actual < expected:
        raise FormatError(
            f"truncated IDX payload: expected {expected} bytes, got {actual}", "data-io.load_idx_images"
        )
    px = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16).astype(np.float64)
    return (px / 127.5 - 1.0).reshape(n, rows * cols)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes())


def batches(samples: np.ndarray, batch: int, seed: int, epochs: int | None = None) -> Iterator[np.ndarray]:
    """Shuffled minibatches, reshuffled every epoch; the partial tail is dropped."""
    n = len(samples)
    if batch < 1 or batch > n:
        raise ConfigError(f"batch {batch} must be in [1, {n}]", "data-io.batches")
    rng = Rng(seed)
    per_epoch = n // batch
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(n)
        for i in range(per_epoch):
            yield samples[perm[i * batch : (i + 1) * batch]]
        epoch += 1


def uniform_box(rng: Rng, n: int, d: int) -> np.ndarray:
    return rng.uniform((n, d), -1.0, 1.0)


def split_heldout(samples: np.ndarray, frac: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    k = max(2, int(math.floor(len(samples) * frac)))
    return samples[:-k], samples[-k:]
