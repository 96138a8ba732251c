"""Command-line entry point: ``dcdebm {train,eval,denoise,grid,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import experiments, models


def _config(args) -> experiments.ExperimentConfig:
    if args.config:
        cfg = experiments.ExperimentConfig.from_ini(args.config, args.set or ())
    else:
        cfg = experiments.ExperimentConfig()
        for item in args.set or ():
            key, _, value = item.partition("=")
            cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg


def _fmt(x: float) -> str:
    return "+inf" if x == math.inf else f"{x:.6g}"


def cmd_train(args) -> int:
    cfg = _config(args)
    rec = experiments.run_train(cfg, progress=True)
    status = f"diverged at iter {rec.diverged_at}" if rec.diverged else "ok"
    print(f"final_sm_loss {_fmt(rec.final_sm_loss)} ({status})")
    if rec.checkpoint:
        print(f"checkpoint {rec.checkpoint}")
    return 0


def cmd_eval(args, denoising: bool = False) -> int:
    cfg = _config(args)
    try:
        metrics = experiments.run_eval(args.checkpoint, cfg, denoising=denoising)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(metrics, indent=2, default=_fmt))
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / ("denoise.json" if denoising else "eval.json")).write_text(json.dumps(metrics, indent=2))
    return 0


def cmd_grid(args) -> int:
    model = models.load_checkpoint(args.checkpoint)
    prefix = Path(args.out_dir or ".") / "density"
    experiments.export_grid(model, tuple(args.bounds), args.resolution, prefix)
    print(f"wrote {prefix.with_suffix('.csv')} and {prefix.with_suffix('.pgm')}")
    return 0


def cmd_verify(args) -> int:
    rows = experiments.verify_suite(args.seed or 0)
    for r in rows:
        print(f"{r.status}  {r.name:32s} value={r.value:.3e} tol={r.tolerance:.1e}")
    return 0 if all(r.passed for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcdebm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        if out:
            p.add_argument("--out-dir")

    common(sub.add_parser("train", help="train an EBM"))
    for name in ("eval", "denoise"):
        p = sub.add_parser(name, help="SM loss of a checkpoint" if name == "eval" else "denoising RMSE sweep")
        p.add_argument("checkpoint")
        common(p)
    p = sub.add_parser("grid", help="export exp(f) on a 2-D grid")
    p.add_argument("checkpoint")
    p.add_argument("--bounds", type=float, nargs=4, default=(-4.0, 4.0, -4.0, 4.0),
                   metavar=("X1LO", "X1HI", "X2LO", "X2HI"))
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--out-dir")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p = sub.add_parser("verify", help="run the numerical verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out-dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train":
        return cmd_train(args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "denoise":
        return cmd_eval(args, denoising=True)
    if args.command == "grid":
        return cmd_grid(args)
    return cmd_verify(args)


if __name__ == "__main__":
    sys.exit(main())
