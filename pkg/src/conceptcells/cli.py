"""Command line: ``run``, ``sweep`` and ``report``."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

from . import metrics
from .experiment import ARCHITECTURES, DATASETS, METHODS, SCENARIOS, RunConfig, run
from .netcore import ConfigurationError
from .streams import FormatError

REPORT_COLUMNS = ("method", "scenario", "avg_acc", "avg_forget", "saturation", "seconds")

# flag name -> RunConfig field
_OVERRIDES = {
    "seed": "seed", "out": "output_dir", "method": "method", "scenario": "scenario", "dataset": "dataset",
    "data_dir": "data_dir", "architecture": "architecture", "sparsity": "sparsity", "window": "window",
    "threshold": "threshold", "lr": "learning_rate", "weight_decay": "weight_decay",
    "batch_size": "batch_size", "buffer": "buffer_size", "precision": "precision", "run_id": "run_id",
}


def _base_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _config_from_args(args) -> RunConfig:
    cfg = _base_config(args.config)
    overrides = {field: getattr(args, flag) for flag, field in _OVERRIDES.items()}
    if args.deterministic:
        overrides["deterministic"] = True
    cfg = cfg.with_overrides(**overrides)
    cfg.validate()
    return cfg


def _print_summary(result) -> None:
    s = result.summary
    forget = s["avg_forgetting"]
    forget_txt = "n/a" if forget is None or forget != forget else f"{100 * forget:.2f}%"
    print(f"{result.out_dir}: avg_accuracy={100 * s['avg_accuracy']:.2f}% avg_forgetting={forget_txt} "
          f"cells={s['num_cells']} drifts={len(s['drift_batches'])}")


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = run(cfg)
    if not args.no_plot:
        from .plotting import plot_run
        plot_run(result.out_dir)
    _print_summary(result)
    return 0


def _grid_configs(base: RunConfig, grid: dict) -> tuple[list[str], list[RunConfig]]:
    if not isinstance(grid, dict) or not grid:
        raise ConfigurationError("grid must be a non-empty JSON object of field -> list of values")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigurationError(f"grid entry {k!r} must be a non-empty list")
    configs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        d = base.to_dict()
        d.update(dict(zip(keys, values)))
        d["run_id"] = ""
        configs.append(RunConfig.from_dict(d))
    return keys, configs


def _run_quiet(cfg: RunConfig) -> dict:
    result = run(cfg)
    return {"run_id": os.path.basename(result.out_dir), **result.summary}


def cmd_sweep(args) -> int:
    base = _base_config(args.config)
    if args.out:
        base = base.with_overrides(output_dir=args.out)
    if args.deterministic:
        base = base.with_overrides(deterministic=True)
    with open(args.grid, encoding="utf-8") as fh:
        grid = json.load(fh)
    keys, configs = _grid_configs(base, grid)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            summaries = list(pool.map(_run_quiet, configs))
    else:
        summaries = [_run_quiet(c) for c in configs]
    rows = []
    for cfg, s in zip(configs, summaries):
        row = {k: getattr(cfg, k) for k in keys}
        row.update({"avg_accuracy": s["avg_accuracy"], "avg_forgetting": s["avg_forgetting"],
                    "num_cells": s["num_cells"], "run_id": s["run_id"]})
        rows.append(row)
    os.makedirs(base.output_dir, exist_ok=True)
    header = list(keys) + ["avg_accuracy", "avg_forgetting", "num_cells", "run_id"]
    out_csv = os.path.join(base.output_dir, "sweep.csv")
    metrics.write_csv(out_csv, header, ([r[h] for h in header] for r in rows))
    if not args.no_plot:
        from .plotting import plot_sweep
        plot_sweep(rows, keys, os.path.join(base.output_dir, "sweep.png"))
    print(f"{len(rows)} runs -> {out_csv}")
    return 0


def _expand_run_dirs(dirs: Sequence[str]) -> list[str]:
    out = []
    for d in dirs:
        if os.path.isdir(d) and not os.path.exists(os.path.join(d, "summary.json")):
            children = sorted(os.path.join(d, c) for c in os.listdir(d)
                              if os.path.exists(os.path.join(d, c, "summary.json")))
            out.extend(children or [d])
        else:
            out.append(d)
    return out


def collect_report_rows(dirs: Sequence[str]) -> list[dict]:
    rows = []
    for d in _expand_run_dirs(dirs):
        path = os.path.join(d, "summary.json")
        try:
            with open(path, encoding="utf-8") as fh:
                s = json.load(fh)
            seconds = s.get("seconds")
            timing = os.path.join(d, "timing.json")
            if seconds is None and os.path.exists(timing):
                with open(timing, encoding="utf-8") as fh:
                    seconds = json.load(fh).get("seconds")
            rows.append({"method": s["method"], "scenario": s["scenario"], "avg_acc": s["avg_accuracy"],
                         "avg_forget": s.get("avg_forgetting"), "saturation": s.get("saturation"),
                         "seconds": seconds, "dir": d})
        except (OSError, ValueError, KeyError, TypeError) as exc:
            print(f"warning: skipping {d}: {exc}", file=sys.stderr)
    return rows


def render_markdown(rows: Sequence[dict]) -> str:
    def cell(v, pct=False):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return f"{100 * v:.2f}" if pct else f"{v:.2f}"
        return str(v)

    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join([r["method"], r["scenario"], cell(r["avg_acc"], True),
                                        cell(r["avg_forget"], True), cell(r["saturation"], True),
                                        cell(r["seconds"])]) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = collect_report_rows(args.dirs)
    if args.csv:
        metrics.write_csv(args.csv, REPORT_COLUMNS, ([r[c] for c in REPORT_COLUMNS] for r in rows))
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([metrics._fmt(r[c]) for c in REPORT_COLUMNS])
        sys.stdout.write(buf.getvalue())
    if args.markdown:
        with open(args.markdown, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_markdown(rows))
    if not args.no_plot and rows:
        from .plotting import plot_comparison, plot_run
        for r in rows:
            plot_run(r["dir"])
        if args.figure:
            plot_comparison(rows, args.figure)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conceptcells", description="Online continual learning with concept cells.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", help="JSON RunConfig file (flags override it)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output root directory")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--scenario", choices=SCENARIOS)
    r.add_argument("--dataset", choices=DATASETS)
    r.add_argument("--data-dir", dest="data_dir")
    r.add_argument("--architecture", choices=ARCHITECTURES)
    r.add_argument("--sparsity", type=float)
    r.add_argument("--window", type=int)
    r.add_argument("--threshold", type=float)
    r.add_argument("--lr", type=float)
    r.add_argument("--weight-decay", dest="weight_decay", type=float)
    r.add_argument("--batch-size", dest="batch_size", type=int)
    r.add_argument("--buffer", type=int, help="replay capacity M")
    r.add_argument("--precision", choices=("fast", "verify"))
    r.add_argument("--run-id", dest="run_id")
    r.add_argument("--deterministic", action="store_true", help="single BLAS thread, timing kept out of summary")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every combination of a parameter grid")
    s.add_argument("--config")
    s.add_argument("--grid", required=True, help='JSON object, e.g. {"sparsity": [0.8, 0.95], "window": [5, 10]}')
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="tabulate finished runs and render their figures")
    rep.add_argument("dirs", nargs="*")
    rep.add_argument("--csv", help="write the table here instead of stdout")
    rep.add_argument("--markdown", help="also write a markdown table")
    rep.add_argument("--figure", help="comparison bar chart path")
    rep.add_argument("--no-plot", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
