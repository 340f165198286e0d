"""Command-line entry points.

Verbs: ``run`` executes an experiment config, ``analyze`` computes spectra /
loss planes / random surfaces from checkpoints, ``compare`` tabulates report
improvements. Exit codes: 0 ok, 1 configuration error, 2 runtime error.
The FLATFED_OUT environment variable sets the root for run directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .analysis import (
    eval_random_surface,
    plane_grid,
    plane_export,
    probe_batch,
    spectrum_export,
    surface_export,
    top_k_eigs,
)
from .config import parse_config
from .errors import ConfigError, FlatFedError
from .runner import build_setup, compare_runs, load_checkpoint, run_experiment

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatfed", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config")
    run_p.add_argument("--out", default=None, help="run directory (default from config / FLATFED_OUT)")
    run_p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    an_p = sub.add_parser("analyze", help="diagnostics on saved checkpoints")
    an_sub = an_p.add_subparsers(dest="what", required=True)

    spec_p = an_sub.add_parser("spectrum", help="top-k Hessian eigenvalues")
    spec_p.add_argument("run_dir")
    spec_p.add_argument("--checkpoint", default=None, help="checkpoint path (default: latest)")
    spec_p.add_argument("--k", type=int, default=5)
    spec_p.add_argument("--batch", type=int, default=1024)
    spec_p.add_argument("--max-iters", type=int, default=20)
    spec_p.add_argument("--split", choices=("train", "test"), default="train")
    spec_p.add_argument("--seed", type=int, default=0)
    spec_p.add_argument("--out", default=None)

    plane_p = an_sub.add_parser("plane", help="loss/error plane through three checkpoints")
    plane_p.add_argument("run_dir")
    plane_p.add_argument("--checkpoints", nargs=3, required=True, metavar=("A", "B", "C"))
    plane_p.add_argument("--n", type=int, default=21)
    plane_p.add_argument("--metric", choices=("loss", "error"), default="loss")
    plane_p.add_argument("--split", choices=("train", "test"), default="train")
    plane_p.add_argument("--line", choices=("sgd", "swa"), default="sgd",
                         help="which model line to read from each checkpoint")
    plane_p.add_argument("--out", default=None)

    surf_p = an_sub.add_parser("surface", help="loss surface along two random directions")
    surf_p.add_argument("run_dir")
    surf_p.add_argument("--checkpoint", default=None)
    surf_p.add_argument("--resolution", type=int, default=21)
    surf_p.add_argument("--radius", type=float, default=1.0)
    surf_p.add_argument("--seed", type=int, default=0)
    surf_p.add_argument("--metric", choices=("loss", "error"), default="loss")
    surf_p.add_argument("--split", choices=("train", "test"), default="train")
    surf_p.add_argument("--out", default=None)

    cmp_p = sub.add_parser("compare", help="improvement table over report.json files")
    cmp_p.add_argument("reports", nargs="+", help="report files; the last one is the reference")
    cmp_p.add_argument("--metric", default="headline_accuracy")

    return parser


def _load_run(run_dir: str):
    cfg_path = os.path.join(run_dir, "config.cfg")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"{run_dir} has no config.cfg snapshot")
    cfg = parse_config(cfg_path)
    return cfg, build_setup(cfg)


def _pick_checkpoint(run_dir: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    from .runner import _latest_checkpoint

    latest = _latest_checkpoint(os.path.join(run_dir, "checkpoints"))
    if latest is None:
        raise ConfigError(f"{run_dir} has no checkpoints")
    return latest


def _write_export(export: dict, out_path: str | None, default_path: str) -> str:
    path = out_path or default_path
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(export, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    report = run_experiment(cfg, out_dir=args.out, resume=args.resume)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_spectrum(args) -> int:
    cfg, setup = _load_run(args.run_dir)
    server = load_checkpoint(_pick_checkpoint(args.run_dir, args.checkpoint))
    ds = setup.train_eval_ds if args.split == "train" else setup.test_eval_ds
    batch = probe_batch(ds, args.batch, args.seed)
    report = top_k_eigs(
        server.theta, setup.model, batch, k=args.k, max_iters=args.max_iters, seed=args.seed
    )
    export = spectrum_export(report, seed=args.seed)
    path = _write_export(
        export, args.out, os.path.join(args.run_dir, "exports", "spectrum.json")
    )
    print(f"wrote {path}: eigenvalues {[round(v, 6) for v in report.eigenvalues]}")
    return 0


def _cmd_plane(args) -> int:
    cfg, setup = _load_run(args.run_dir)
    thetas = []
    for ck in args.checkpoints:
        server = load_checkpoint(ck)
        thetas.append(server.swa_theta if args.line == "swa" else server.theta)
    ds = setup.train_eval_ds if args.split == "train" else setup.test_eval_ds
    grid = plane_grid(
        thetas[0], thetas[1], thetas[2], setup.model, ds, n=args.n, metric=args.metric
    )
    export = plane_export(grid)
    export["meta"]["split"] = args.split
    path = _write_export(export, args.out, os.path.join(args.run_dir, "exports", "plane.json"))
    print(f"wrote {path}: {args.n}x{args.n} {args.metric} grid on {args.split}")
    return 0


def _cmd_surface(args) -> int:
    cfg, setup = _load_run(args.run_dir)
    server = load_checkpoint(_pick_checkpoint(args.run_dir, args.checkpoint))
    ds = setup.train_eval_ds if args.split == "train" else setup.test_eval_ds
    grid = eval_random_surface(
        server.theta,
        setup.model,
        ds,
        resolution=args.resolution,
        seed=args.seed,
        radius=args.radius,
        metric=args.metric,
    )
    export = surface_export(grid)
    export["meta"]["split"] = args.split
    path = _write_export(export, args.out, os.path.join(args.run_dir, "exports", "surface.json"))
    print(f"wrote {path}: {args.resolution}x{args.resolution} surface, center {grid.center_value:.6f}")
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for rp in args.reports:
        with open(rp, "r", encoding="utf-8") as fh:
            reports.append(json.load(fh))
    rows = compare_runs(reports, metric=args.metric)
    base = reports[-1]
    print(f"reference: {base.get('name', '?')} {args.metric}={base[args.metric]:.4f}")
    print(f"{'name':<24} {'metric':>10} {'absolute':>10} {'relative':>10}")
    for row in rows:
        rel = f"{row['relative_pct']:+.2f}%" if row["relative_pct"] is not None else "undefined"
        print(f"{row['name']:<24} {row['metric']:>10.4f} {row['absolute']:>+10.4f} {rel:>10}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            return _cmd_run(args)
        if args.verb == "analyze":
            if args.what == "spectrum":
                return _cmd_spectrum(args)
            if args.what == "plane":
                return _cmd_plane(args)
            return _cmd_surface(args)
        return _cmd_compare(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FlatFedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
