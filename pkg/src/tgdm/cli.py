"""Command-line entry point: ``tgdm gen-data | train | eval | plot``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Verbosity follows ``TGDM_LOG`` (``debug`` or ``info``; warnings only otherwise).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .benchmark import synthetic_pair
from .config import ConfigError, RunConfig, load_config, serialize_config
from .data import DatasetFormatError, DomainShiftSpec, load_dataset, make_splits, save_dataset, split_datasets
from .evaluation import (DEFAULT_SUITE, config_digest, evaluate_accuracy,
                         lambda_trajectory_stats, run_baseline_suite)
from .model import CheckpointError, load_params, save_params
from .plotting import LogFormatError, downsampled_csv, read_log_csv, svg_line_plot
from .trainer import VARIANTS, IterationLog, initial_params, train

log = logging.getLogger("tgdm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("TGDM_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _datasets(cfg: RunConfig):
    if cfg.source_dir or cfg.target_dir:
        if not (cfg.source_dir and cfg.target_dir):
            raise ConfigError("source_dir and target_dir must be given together")
        return load_dataset(cfg.source_dir, "source"), load_dataset(cfg.target_dir, "target")
    return synthetic_pair(cfg.synth_seed, cfg.synth_source_classes, cfg.synth_target_classes,
                          cfg.synth_per_class, cfg.synth_dim, cfg.shift())


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "variant", None):
        over["variant"] = args.variant
    if getattr(args, "fixed_lambda", None) is not None:
        over["fixed_lambda"] = args.fixed_lambda
    if getattr(args, "iterations", None) is not None:
        over["iterations"] = args.iterations
    if getattr(args, "output_dir", None):
        over["output_dir"] = args.output_dir
    if getattr(args, "episodes", None) is not None:
        over["eval_episodes"] = args.episodes
    cfg = cfg.with_overrides(**over)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    return cfg


def cmd_gen_data(args) -> int:
    if min(args.classes, args.per_class) <= 0 or args.dim < 2:
        raise UsageError("gen-data: --classes/--per-class must be positive and --dim >= 2")
    n_target = args.target_classes or args.classes
    shift = DomainShiftSpec(args.rotation, args.translation, args.spread)
    source, target = synthetic_pair(args.seed, args.classes, n_target, args.per_class,
                                    args.dim, shift)
    out = Path(args.out)
    for name, ds in (("source", source), ("target", target)):
        save_dataset(ds, out / name)
        print(f"{out / name}: {len(ds.classes)} classes x {args.per_class} samples, "
              f"dim {ds.feature_dim}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    source, target = _datasets(cfg)
    split = make_splits(source, target, cfg.split_config())
    tcfg = cfg.train_config()
    out = Path(cfg.output_dir) / cfg.variant
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(serialize_config(cfg))
    csv = open(out / "log.csv", "w")
    csv.write(IterationLog.CSV_HEADER + "\n")

    def on_iteration(row, theta, omega):
        csv.write(row.csv_row() + "\n")
        every = tcfg.checkpoint_every
        if every and (row.t + 1) % every == 0:
            save_params(out / f"theta_{row.t + 1:06d}.ckpt", theta)
            if omega is not None:
                save_params(out / f"drgn_{row.t + 1:06d}.ckpt", omega)

    try:
        res = train(source, target, split, tcfg, cfg.variant, cfg.fixed_lambda, on_iteration)
    finally:
        csv.close()
    save_params(out / "theta.ckpt", res.theta)
    if res.omega is not None:
        save_params(out / "drgn.ckpt", res.omega)
    lam = [r.lam for r in res.log if np.isfinite(r.lam)]
    print(f"trained {cfg.variant} for {len(res.log)} iterations -> {out}")
    if lam:
        print(f"mean lambda {np.mean(lam):.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    source, target = _datasets(cfg)
    split = make_splits(source, target, cfg.split_config())
    out_path = Path(args.output) if args.output else Path(cfg.output_dir) / "eval.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    if args.suite:
        suite = run_baseline_suite(source, target, split, tcfg, DEFAULT_SUITE,
                                   cfg.eval_episodes, cfg.eval_n_query, cfg.eval_seed)
        reports = suite.reports
    else:
        if args.untrained:
            theta, _ = initial_params(tcfg, source.feature_dim)
            name = "untrained"
        else:
            ckpt = Path(args.checkpoint) if args.checkpoint else \
                Path(cfg.output_dir) / cfg.variant / "theta.ckpt"
            if not ckpt.is_file():
                raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
            theta = load_params(ckpt)
            name = cfg.variant
        _, _, d_tn = split_datasets(source, target, split)
        reports = [evaluate_accuracy(theta, d_tn, cfg.n_way, cfg.k_shot, cfg.eval_n_query,
                                     cfg.eval_episodes, cfg.eval_seed, name, None,
                                     config_digest(tcfg))]
    with open(out_path, "w") as fh:
        for rep in reports:
            line = rep.to_json()
            fh.write(line + "\n")
            print(line)
            if rep.error is None:
                print(f"{rep.method}: {100 * rep.mean_acc:.2f} +- {100 * rep.ci95:.2f} %",
                      file=sys.stderr)
    return 2 if any(r.error for r in reports) else 0


def cmd_plot(args) -> int:
    rows = read_log_csv(args.log)
    out = Path(args.out_dir) if args.out_dir else Path(args.log).parent
    out.mkdir(parents=True, exist_ok=True)
    stats = lambda_trajectory_stats(rows)
    t = [float(r.t) for r in rows]
    idx = range(len(rows))
    centers = [float(rows[min(i * stats.window + stats.window // 2, len(rows) - 1)].t)
               for i in range(len(stats.window_means))]
    (out / "trajectory.csv").write_text(downsampled_csv(rows, args.points))
    (out / "lambda.svg").write_text(svg_line_plot(
        {"lambda_hat": (t, [rows[i].lambda_hat for i in idx]),
         "lambda": (t, [rows[i].lam for i in idx]),
         "window mean": (centers, list(stats.window_means))},
        "mix ratio per iteration", "iteration", "lambda"))
    (out / "loss.svg").write_text(svg_line_plot(
        {"L_FSL": (t, [r.loss_fsl for r in rows]), "L_T_val": (t, [r.loss_tval for r in rows])},
        "training losses", "iteration", "loss"))
    print(f"lambda mean {stats.mean:.4f} std {stats.std:.4f} (window {stats.window})")
    print(f"wrote {out / 'lambda.svg'}, {out / 'loss.svg'}, {out / 'trajectory.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tgdm", description="Target-guided dynamic mixup for cross-domain few-shot learning")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic source/target dataset pair")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--target-classes", type=int, default=None)
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--rotation", type=float, default=0.0, help="degrees")
    g.add_argument("--translation", type=float, default=0.0)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--lambda", dest="fixed_lambda", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or run the baseline suite")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--variant", choices=VARIANTS)
    e.add_argument("--suite", action="store_true")
    e.add_argument("--untrained", action="store_true", help="evaluate the seeded initial model")
    e.add_argument("--episodes", type=int)
    e.add_argument("--iterations", type=int, help="training iterations for --suite")
    e.add_argument("--output")
    e.add_argument("--output-dir")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="plot a training log")
    pl.add_argument("--log", required=True)
    pl.add_argument("--out-dir")
    pl.add_argument("--points", type=int, default=200)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, DatasetFormatError, CheckpointError, LogFormatError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
