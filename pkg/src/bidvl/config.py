"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .divergence import RATIO_VARIANTS, RatioMode
from .errors import ConfigError
from .data import KINDS

GRAD_MODES = ("offset", "non-offset")
ENERGY_LOSSES = ("plain", "hinge")


@dataclass(frozen=True)
class TrainConfig:
    grad_mode: str = "offset"
    energy_loss: str = "plain"
    ratio_mode: str = "constant"
    r_basic: float = 0.05
    n_ll_steps: int = 1
    lr_var: float = 1e-3
    lr_energy: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 128
    seed: int = 0
    d_h: int = 2
    lambda_rec: float = 1.0
    max_iters: int = 10_000
    eval_every: int = 1000
    dataset: str = "eight_gaussians"
    dataset_n: int = 50_000

    @property
    def ratio(self) -> RatioMode:
        return RatioMode(self.ratio_mode, self.r_basic)

    @property
    def adam_betas(self) -> tuple[float, float]:
        return (self.adam_beta1, self.adam_beta2)

    def replace(self, **kw) -> "TrainConfig":
        cfg = replace(self, **kw)
        validate(cfg)
        return cfg


KEYS = tuple(f.name for f in fields(TrainConfig))
_TYPES = {f.name: f.type for f in fields(TrainConfig)}

_CHOICES = {
    "grad_mode": GRAD_MODES,
    "energy_loss": ENERGY_LOSSES,
    "ratio_mode": RATIO_VARIANTS,
    "dataset": KINDS,
}


def _check(key: str, value, line: int | None = None) -> None:
    where = "data-io.parse_config"
    at = f" (line {line})" if line is not None else ""

    def bad(msg):
        raise ConfigError(f"{key}: {msg}{at}", where)

    if key in _CHOICES and value not in _CHOICES[key]:
        bad(f"{value!r} not one of {', '.join(_CHOICES[key])}")
    if key in ("r_basic", "lr_var", "lr_energy", "adam_eps", "lambda_rec") and not value > 0:
        bad("must be > 0")
    if key in ("adam_beta1", "adam_beta2") and not 0 <= value < 1:
        bad("must be in [0, 1)")
    if key == "n_ll_steps" and value < 1:
        bad("must be >= 1")
    if key == "batch" and value < 2:
        bad("must be >= 2")
    if key in ("d_h", "eval_every", "dataset_n") and value < 1:
        bad("must be >= 1")
    if key == "max_iters" and value < 0:
        bad("must be >= 0")
    if key == "seed" and not 0 <= value < 2**64:
        bad("must be a 64-bit unsigned integer")


def _convert(key: str, text: str, line: int | None):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text, 0)
        if kind == "float":
            return float(text)
    except ValueError:
        at = f" (line {line})" if line is not None else ""
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}{at}", "data-io.parse_config") from None
    return text


def validate(cfg: TrainConfig) -> None:
    for key in KEYS:
        _check(key, getattr(cfg, key))


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' (line {lineno})", "data-io.parse_config")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r} (line {lineno})", "data-io.parse_config")
        v = _convert(key, val, lineno)
        _check(key, v, lineno)
        values[key] = v
    cfg = replace(base or TrainConfig(), **values)
    validate(cfg)
    return cfg


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply ``key=value`` strings with the same rules as the file parser."""
    return parse_config("\n".join(overrides), base=cfg)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {getattr(cfg, k)}\n" for k in KEYS)
