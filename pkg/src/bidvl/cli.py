"""Command-line entry point.

    bidvl <train|sample|recon|ood|gradcheck|oracle|eval> [-c CONFIG] [-o OUTDIR]
          [--set key=value]... [--seeds N] [--checkpoint PATH] [--n N]

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure,
3 failed verification suite.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import evaluate as ev
from .config import TrainConfig, apply_overrides, format_config, parse_config
from .core import load_models, train
from .data import DatasetSpec, eight_gaussian_centers, make_dataset, make_heldout
from .errors import BidvlError, ConfigError, FormatError, NumericError
from .gradcheck import TOLERANCE, run_gradcheck
from .oracle import run_suite, suite_csv
from .rng import STREAM_EVAL, Rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
COMMANDS = ("train", "sample", "recon", "ood", "gradcheck", "oracle", "eval")

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "cli.run")

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bidvl", description="Bi-level doubly variational training of energy-based latent models.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="key = value config file")
    p.add_argument("-o", "--outdir", default="bidvl_out")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, default=None, help="number of random cases for oracle/gradcheck")
    p.add_argument("--checkpoint", help="checkpoint file (default: newest in OUTDIR)")
    p.add_argument("--n", type=int, default=4096, help="number of samples")
    return p

def load_config(path: str | None, overrides: list[str], env=os.environ) -> TrainConfig:
    """Config file, then BIDVL_SEED, then --set overrides."""
    cfg = TrainConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}", "cli.load_config") from None
        cfg = parse_config(text)
    if env.get("BIDVL_SEED") is not None:
        cfg = apply_overrides(cfg, [f"seed = {env['BIDVL_SEED']}"])
    return apply_overrides(cfg, overrides)

def _dataset_spec(cfg: TrainConfig) -> DatasetSpec:
    return DatasetSpec(cfg.dataset, cfg.dataset_n, cfg.seed)

def _checkpoints(outdir: Path) -> list[Path]:
    return sorted(outdir.glob("ckpt_*.bdvl"))

def _resolve_checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    found = _checkpoints(Path(args.outdir))
    if not found:
        raise ConfigError(f"no checkpoint given and none found in {args.outdir}", "cli.run")
    return found[-1]

def _centers(cfg: TrainConfig):
    return eight_gaussian_centers() if cfg.dataset == "eight_gaussians" else None

def cmd_train(args, cfg: TrainConfig, out) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(format_config(cfg))
    res = train(cfg, make_dataset(_dataset_spec(cfg)), outdir)
    last = res.rows[-1] if res.rows else {}
    print(f"trained {cfg.max_iters} iterations into {outdir}", file=out)
    for k, v in last.items():
        if k != "iter":
            print(f"  {k} = {v:.6g}", file=out)
    return EXIT_OK

def cmd_sample(args, cfg: TrainConfig, out) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1", "cli.sample")
    it, models = load_models(_resolve_checkpoint(args))
    x = ev.sample(models, Rng(cfg.seed, STREAM_EVAL), args.n)
    Path(args.outdir).mkdir(parents=True, exist_ok=True)
    path = Path(args.outdir) / "samples.csv"
    ev.write_samples_csv(path, x)
    print(f"wrote {args.n} samples from iteration {it} to {path}", file=out)
    return EXIT_OK

def cmd_recon(args, cfg: TrainConfig, out) -> int:
    it, models = load_models(_resolve_checkpoint(args))
    test = make_heldout(_dataset_spec(cfg), args.n)
    xhat, err = ev.recon_pass(models, test)
    Path(args.outdir).mkdir(parents=True, exist_ok=True)
    ev.write_samples_csv(Path(args.outdir) / "recon.csv", xhat)
    print(f"reconstruction rmse {err:.6f} (iteration {it}, {len(test)} held-out points)", file=out)
    return EXIT_OK

def cmd_ood(args, cfg: TrainConfig, out) -> int:
    it, models = load_models(_resolve_checkpoint(args))
    test = make_heldout(_dataset_spec(cfg), args.n)
    noise = Rng(cfg.seed, STREAM_EVAL).uniform(test.shape, -1.0, 1.0)
    for name, a in ev.ood_report(models, test, {"uniform": noise}).items():
        print(f"auroc {name} {a:.6f} (iteration {it})", file=out)
    return EXIT_OK

def cmd_gradcheck(args, cfg: TrainConfig, out) -> int:
    rows = run_gradcheck(args.seeds or 10)
    worst = max(r.rel_error for r in rows)
    Path(args.outdir).mkdir(parents=True, exist_ok=True)
    with open(Path(args.outdir) / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "loss", "param", "rel_error"])
        for r in rows:
            w.writerow([r.seed, r.loss, r.param, repr(r.rel_error)])
    failed = [r for r in rows if not r.ok]
    print(f"gradcheck max relative error {worst:.3e} over {len(rows)} parameter arrays (tolerance {TOLERANCE:g})", file=out)
    for r in failed:
        print(f"  FAIL seed {r.seed} {r.loss} {r.param}: {r.rel_error:.3e}", file=out)
    return EXIT_VERIFY if failed else EXIT_OK

def cmd_oracle(args, cfg: TrainConfig, out) -> int:
    rows = run_suite(args.seeds or 50)
    Path(args.outdir).mkdir(parents=True, exist_ok=True)
    (Path(args.outdir) / "oracle.csv").write_text(suite_csv(rows))
    ok = True
    for r in rows:
        ok &= r.passed
        label = "theorem1 max deviation" if r.check == "theorem1_value" else f"{r.check} max deviation"
        print(f"{label} {r.max_deviation:.3e} (tolerance {r.tolerance:g}) {'ok' if r.passed else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_VERIFY

def cmd_eval(args, cfg: TrainConfig, out) -> int:
    """Evaluate every checkpoint; the last one is the final report, OOD takes the best."""
    paths = [Path(args.checkpoint)] if args.checkpoint else _checkpoints(Path(args.outdir))
    if not paths:
        raise ConfigError(f"no checkpoints in {args.outdir}", "cli.eval")
    heldout = make_heldout(_dataset_spec(cfg), args.n)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    table = []
    final = samples = models = None
    for path in paths:
        it, models = load_models(path)
        final, samples = ev.full_report(models, heldout, Rng(cfg.seed, STREAM_EVAL), _centers(cfg), args.n)
        final.checkpoint_iter = it
        table.append(final)
    best = max(table, key=lambda r: r.auroc_per_ood_set["uniform"])
    with open(outdir / "eval_checkpoints.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "mmd2", "rmse", "auroc_uniform", "modes_covered"])
        for r in table:
            w.writerow([r.checkpoint_iter, repr(r.mmd2), repr(r.rmse), repr(r.auroc_per_ood_set["uniform"]), r.modes_covered])
    (outdir / "eval_report.csv").write_text(final.to_csv())
    ev.write_samples_csv(outdir / "eval_samples.csv", samples)
    if models.d_v == 2:
        ev.write_grid(outdir / "energy_grid", ev.energy_grid(models))
    print(f"final checkpoint iteration {final.checkpoint_iter}", file=out)
    print(f"  mmd2 {final.mmd2:.6f}", file=out)
    print(f"  rmse {final.rmse:.6f}", file=out)
    if final.per_mode_mass.size:
        print(f"  modes covered {final.modes_covered}/{final.per_mode_mass.size}", file=out)
    print(f"  auroc uniform {final.auroc_per_ood_set['uniform']:.6f}", file=out)
    print(f"best OOD checkpoint iteration {best.checkpoint_iter}: auroc uniform {best.auroc_per_ood_set['uniform']:.6f}", file=out)
    return EXIT_OK

HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "recon": cmd_recon,
    "ood": cmd_ood,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "eval": cmd_eval,
}

def run(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.seeds is not None and args.seeds < 1:
            raise ConfigError("--seeds must be >= 1", "cli.run")
        cfg = load_config(args.config, args.overrides)
        return HANDLERS[args.command](args, cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=err)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=err)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"error: {e}", file=err)
        return EXIT_NUMERIC
    except BidvlError as e:
        print(f"error: {e}", file=err)
        return EXIT_NUMERIC

def main() -> None:
    sys.exit(run())

if __name__ == "__main__":
    main()
