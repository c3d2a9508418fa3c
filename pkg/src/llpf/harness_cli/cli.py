"""Command-line entry point.

Subcommands: train-modes, connect-m2m, collapse-m2o, connect-avs, continuity,
seed-study, plot.  All but plot take ``--config``; every random draw derives
from seeds declared there (or ``--seed-override``).  Exit codes: 0 success,
1 config/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..analysis import interpolation_continuity, path_metrics, seed_variance_study
from ..llpf_core import connect_cross_variance, llpf_m2m, llpf_m2o
from ..nn_engine.engine import init_params
from ..nn_engine.trainer import evaluate, fixed_subset, train_until
from ..param_space import LayoutMismatch
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config
from .datasets import IdxFormatError
from .records import read_path_record, write_manifest, write_path_record
from .reports import emit_csv, emit_svg, metric_fieldnames, read_csv
from . import run_config as rc

log = logging.getLogger("llpf")

VALIDATION_ERRORS = (
    ConfigError,
    CheckpointError,
    IdxFormatError,
    LayoutMismatch,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on unknown flags; bad usage is a validation error
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("command failed: %s", exc)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llpf", description=__doc__)
    parser.add_argument("--log-level", default="warning",
                        help="logging level (debug, info, warning, error)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, needs_config=True):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config file")
            p.add_argument("--out", help="override the [output] dir")
            p.add_argument("--jobs", type=int, default=1, help="worker pool size")
            p.add_argument("--seed-override", type=int, dest="seed_override",
                           help="replace every configured seed")
            p.add_argument("--precision", choices=("f32", "f64"),
                           help="override the [output] precision")
        p.set_defaults(handler=handler)
        return p

    add("train-modes", cmd_train_modes)
    add("connect-m2m", cmd_connect_m2m)
    add("collapse-m2o", cmd_collapse_m2o)
    add("connect-avs", cmd_connect_avs)
    add("continuity", cmd_continuity)
    add("seed-study", cmd_seed_study)

    plot = sub.add_parser("plot")
    plot.add_argument("csv", help="any CSV emitted by another command")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.add_argument("--x", help="x column (default: first column)")
    plot.add_argument("--y", help="comma-separated y columns (default: every numeric column)")
    plot.add_argument("--log-y", action="store_true", help="log-scale the y axis")
    plot.add_argument("--title", default="")
    plot.set_defaults(handler=cmd_plot)
    return parser


def _load_common(args):
    cfg = parse_config(args.config)
    graph = rc.build_graph(cfg)
    train_data, test_data = rc.build_datasets(cfg)
    out = rc.build_output(cfg)
    if args.out:
        out.out_dir = Path(args.out)
    if args.precision:
        out.precision = args.precision
    if args.seed_override is not None:
        out.seed = args.seed_override
    return cfg, graph, train_data, test_data, out


def cmd_train_modes(args) -> int:
    cfg, graph, train_data, test_data, out = _load_common(args)
    modes = rc.build_modes(cfg)
    seeds = modes.seeds
    if args.seed_override is not None:
        seeds = [args.seed_override]
    out.out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc)

    def train_one(seed: int):
        params = init_params(graph, seed, out.dtype)
        rng = np.random.default_rng(seed)
        result = train_until(
            graph, params, train_data, modes.trainer, modes.rule, rng,
            augment=modes.augment,
        )
        subset = fixed_subset(train_data, out.eval_subset)
        loss, acc = evaluate(graph, result.params, subset)
        return seed, result, loss, acc

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(train_one, seeds))
    else:
        results = [train_one(seed) for seed in seeds]

    for seed, result, loss, acc in results:
        ckpt = out.out_dir / f"mode_{seed}.ckpt"
        save_checkpoint(result.params, graph, ckpt)
        rows = [
            {"round": i + 1, "loss": v}
            for i, v in enumerate(result.losses)
        ]
        emit_csv(["round", "loss"], rows, out.out_dir / f"mode_{seed}_train.csv")
        bar = modes.acceptance_loss
        status = "ok" if bar is None or loss < bar else "FAILS acceptance"
        print(
            f"mode seed={seed}: rounds={result.rounds} rolling={result.rolling_loss:.4g} "
            f"train_loss={loss:.4g} train_acc={acc:.4g} [{status}] -> {ckpt.name}"
        )
    write_manifest(out.out_dir, "train-modes", cfg.digest, seeds, started)
    return 0


def _finish_record(record, graph, cfg, out, command, seeds, started):
    write_path_record(out.out_dir, record, graph)
    extra = {"points": len(record.points)}
    if record.stage_boundary is not None:
        extra["stage_boundary"] = record.stage_boundary
    write_manifest(out.out_dir, command, cfg.digest, seeds, started, extra)
    final = record.points[-1]
    print(
        f"{command}: {len(record.points)} points -> {out.out_dir}/metrics.csv "
        f"(final rolling loss {final.rolling_train_loss:.4g})"
    )
    return 0


def cmd_connect_m2m(args) -> int:
    cfg, graph, train_data, test_data, out = _load_common(args)
    block = rc.build_m2m(cfg, graph)
    started = datetime.now(timezone.utc)
    start = load_checkpoint(graph, block.start, out.dtype)
    dest = load_checkpoint(graph, block.dest, out.dtype)
    settings = rc.search_settings(
        out, cfg.digest, (block.start.name, block.dest.name),
        block.mode_acceptance_loss, block.variance_ratio_bound,
        block.augment_path_steps,
    )
    record = llpf_m2m(
        start, dest, block.plan, block.trainer, train_data, test_data,
        settings=settings, graph=graph,
    )
    return _finish_record(record, graph, cfg, out, "connect-m2m", [out.seed], started)


def cmd_collapse_m2o(args) -> int:
    cfg, graph, train_data, test_data, out = _load_common(args)
    block = rc.build_m2o(cfg, graph)
    started = datetime.now(timezone.utc)
    start = load_checkpoint(graph, block.start, out.dtype)
    settings = rc.search_settings(
        out, cfg.digest, (block.start.name, "origin"), block.mode_acceptance_loss,
        augment_path_steps=block.augment_path_steps,
    )
    record = llpf_m2o(
        start, block.cfg, block.trainer, train_data, test_data,
        settings=settings, graph=graph,
    )
    return _finish_record(record, graph, cfg, out, "collapse-m2o", [out.seed], started)


def cmd_connect_avs(args) -> int:
    cfg, graph, train_data, test_data, out = _load_common(args)
    block = rc.build_avs(cfg, graph)
    started = datetime.now(timezone.utc)
    start = load_checkpoint(graph, block.start, out.dtype)
    dest = load_checkpoint(graph, block.dest, out.dtype)
    settings = rc.search_settings(
        out, cfg.digest, (block.start.name, block.dest.name), block.mode_acceptance_loss
    )
    record = connect_cross_variance(
        start, dest, block.cfg, block.trainer, train_data, test_data,
        settings=settings, graph=graph,
    )
    return _finish_record(record, graph, cfg, out, "connect-avs", [out.seed], started)


def cmd_continuity(args) -> int:
    cfg, graph, train_data, _test_data, out = _load_common(args)
    block = rc.build_continuity(cfg)
    record = read_path_record(block.record_dir, graph, out.dtype)
    report = interpolation_continuity(
        record, block.samples, graph, train_data,
        eval_size=block.eval_subset, use_full_set=block.use_full_set,
    )
    rows = []
    for (lo, hi), losses in zip(report.segment_bounds, report.segment_losses):
        for j, loss in enumerate(losses):
            alpha = j / (block.samples - 1)
            rows.append(
                {
                    "position": lo + alpha * (hi - lo),
                    "segment_start": lo,
                    "segment_end": hi,
                    "alpha": alpha,
                    "train_loss": loss,
                }
            )
    out.out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc)
    emit_csv(
        ["position", "segment_start", "segment_end", "alpha", "train_loss"],
        rows, out.out_dir / "continuity.csv",
    )
    write_manifest(
        out.out_dir, "continuity", cfg.digest, [out.seed], started,
        {"global_max_loss": report.global_max_loss, "segments": len(report.segment_bounds)},
    )
    print(
        f"continuity: {len(report.segment_bounds)} segments x {block.samples} samples, "
        f"global max loss {report.global_max_loss:.4g} -> {out.out_dir}/continuity.csv"
    )
    return 0


def cmd_seed_study(args) -> int:
    cfg, graph, train_data, _test_data, out = _load_common(args)
    modes = rc.build_modes(cfg)
    block = rc.build_seed_study(cfg)
    seeds = block.seeds if block.seeds else list(range(block.n_seeds))
    if args.seed_override is not None:
        seeds = [args.seed_override + i for i in range(len(seeds))]
    table = seed_variance_study(
        graph, modes.trainer, len(seeds), train_data,
        rule=None if block.init_only else modes.rule,
        seeds=seeds,
        acceptance_loss=block.acceptance_loss,
        eval_size=out.eval_subset,
        augment=modes.augment,
    )
    layer_names = list(table.per_layer)
    rows = []
    used_seeds = [s for s in seeds if s not in table.failed_seeds]
    for i, seed in enumerate(used_seeds):
        row = {"seed": seed}
        for name in layer_names:
            _, variance, mean = table.per_layer[name][i]
            row[f"var:{name}"] = variance
            row[f"mean:{name}"] = mean
        rows.append(row)
    fields = ["seed"]
    fields += [f"var:{n}" for n in layer_names]
    fields += [f"mean:{n}" for n in layer_names]
    out.out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc)
    emit_csv(fields, rows, out.out_dir / "seed_study.csv")
    summary_rows = [
        {
            "layer": name,
            "variance_cov": stats["variance_cov"],
            "max_abs_mean_over_std": stats["max_abs_mean_over_std"],
        }
        for name, stats in table.summary.items()
    ]
    if summary_rows:
        emit_csv(
            ["layer", "variance_cov", "max_abs_mean_over_std"],
            summary_rows, out.out_dir / "seed_study_summary.csv",
        )
    write_manifest(
        out.out_dir, "seed-study", cfg.digest, seeds, started,
        {"failed_seeds": table.failed_seeds},
    )
    for row in summary_rows:
        print(
            f"{row['layer']}: variance CoV {row['variance_cov']:.4g}, "
            f"max |mean|/std {row['max_abs_mean_over_std']:.4g}"
        )
    return 0


def cmd_plot(args) -> int:
    header, rows = read_csv(args.csv)
    if not rows:
        raise ConfigError(f"{args.csv}: no data rows")
    x_col = args.x or header[0]
    if x_col not in header:
        raise ConfigError(f"{args.csv}: no column {x_col!r}")
    if args.y:
        y_cols = [c.strip() for c in args.y.split(",")]
        missing = [c for c in y_cols if c not in header]
        if missing:
            raise ConfigError(f"{args.csv}: no columns {missing}")
    else:
        y_cols = [
            c for c in header
            if c != x_col and rows and isinstance(rows[0][c], (int, float))
        ]
        if not y_cols:
            raise ConfigError(f"{args.csv}: no numeric columns to plot")
    x = [row[x_col] for row in rows]
    series = [(c, [float(row[c]) for row in rows]) for c in y_cols]
    emit_svg(x, series, args.out, title=args.title, x_label=x_col, log_y=args.log_y)
    print(f"plot: {len(series)} series x {len(x)} points -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
