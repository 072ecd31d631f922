"""Command-line entry point: ``cifvi <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from cifvi import estimators
from cifvi.autodiff import DomainError
from cifvi.cif import NonFiniteError
from cifvi.distributions import make_rng
from cifvi.kde import Grid, kde_density_grid, write_grid_csv, write_grid_png
from cifvi.train import Config, ConfigError, restore, train


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ckpt_path(value: str) -> Path:
    path = Path(value)
    if path.is_dir():
        path = path / "checkpoint.json"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {value}")
    return path


def _data(experiment, split: str, n: int | None):
    """Rows of x for image experiments (cycled to ``n`` rows), None for MoG."""
    ds = experiment.dataset
    if ds is None:
        return None
    rows = {"val": ds.val, "test": ds.test}.get(split)
    if rows is None:
        rows = (ds.train_greys > 0.5).astype(np.float64)
    if len(rows) == 0:
        raise ValueError(f"the {split} split is empty")
    return rows if n is None else np.resize(rows, (n, rows.shape[1]))


def cmd_train(args) -> dict:
    config = Config.from_json(args.config)
    result = train(config, args.out, progress_every=args.progress)
    last = result.metrics[-1]
    return {"epochs": result.epoch, "final_elbo": last["elbo_mean"],
            "best_metric": result.best_metric, "aborted_steps": result.optimizer.aborted}


def cmd_eval_elbo(args) -> dict:
    exp, _ = restore(_ckpt_path(args.ckpt))
    x = _data(exp, args.split, args.n)
    report = estimators.elbo_report(exp.posterior, exp.target, args.n, make_rng(args.seed), x)
    return report.to_dict()


def cmd_eval_marginal(args) -> dict:
    exp, _ = restore(_ckpt_path(args.ckpt))
    x = _data(exp, args.split, args.n)
    report = estimators.marginal_elbo_estimate(exp.posterior, exp.target, args.n, args.m,
                                               make_rng(args.seed), x)
    return report.to_dict()


def cmd_eval_loglik(args) -> dict:
    exp, _ = restore(_ckpt_path(args.ckpt))
    if exp.dataset is None:
        raise ValueError("log-likelihood needs an image experiment")
    data = _data(exp, args.split, None)
    if args.limit:
        data = data[:args.limit]
    report = estimators.is_log_likelihood(exp.posterior, exp.target, data, args.s, make_rng(args.seed))
    return report.to_dict()


def _samples(exp, n: int, seed: int) -> np.ndarray:
    x = _data(exp, "test", n)
    return exp.posterior.sample(make_rng(seed), None if x is not None else n, x)


def cmd_sample(args) -> dict:
    exp, _ = restore(_ckpt_path(args.ckpt))
    z = _samples(exp, args.n, args.seed)
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([f"z{i + 1}" for i in range(z.shape[1])])
        out.writerows([[repr(float(v)) for v in row] for row in z])
    return {"rows": len(z), "out": str(args.out)}


def cmd_density_grid(args) -> dict:
    exp, _ = restore(_ckpt_path(args.ckpt))
    z = _samples(exp, args.n, args.seed)
    if z.shape[1] != 2:
        raise ValueError(f"density grids need 2-d samples, got dimension {z.shape[1]}")
    xs, ys, density = kde_density_grid(z, Grid(*args.grid[:4], int(args.grid[4])))
    write_grid_csv(args.out, xs, ys, density)
    if args.png:
        write_grid_png(args.png, density)
    return {"cells": int(density.size), "out": str(args.out), "png": args.png}


def build_parser() -> Parser:
    parser = Parser(prog="cifvi", description="Variational inference with continuously-indexed flows.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--progress", type=int, default=0, help="log every N epochs (0 = quiet)")
    p.set_defaults(fn=cmd_train)

    def evaluator(name, fn, help_text, **n_default):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt", required=True, help="checkpoint file or training output dir")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--split", choices=("train", "val", "test"), default="test",
                       help="data split for image experiments")
        p.set_defaults(fn=fn)
        return p

    p = evaluator("eval-elbo", cmd_eval_elbo, "mean and standard error of single-sample ELBOs")
    p.add_argument("--n", type=int, default=10_000)
    p = evaluator("eval-marginal", cmd_eval_marginal, "nested marginal-ELBO estimate")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--m", type=int, default=100)
    p = evaluator("eval-loglik", cmd_eval_loglik, "importance-sampled log-likelihood")
    p.add_argument("--s", type=int, default=1000)
    p.add_argument("--limit", type=int, default=0, help="use only the first N data rows")
    p = evaluator("sample", cmd_sample, "write posterior samples as CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p = evaluator("density-grid", cmd_density_grid, "KDE of posterior samples on a grid")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.add_argument("--grid", type=float, nargs=5, default=[-5.0, 5.0, -5.0, 5.0, 101],
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX", "STEPS"))
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("n", "m", "s"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            print(f"cifvi: error: --{name} must be positive", file=sys.stderr)
            return 1
    try:
        result = args.fn(args)
    except (NonFiniteError, FloatingPointError, DomainError) as exc:
        print(f"cifvi: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ConfigError, ValueError, KeyError) as exc:
        print(f"cifvi: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
