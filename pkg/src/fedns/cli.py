"""Command-line experiment runner: run / sweep / inspect."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import expand_cells, parse_config, parse_sweep, serialize_config
from .simulator import export_report, run_experiment

WORKERS_ENV = "FEDNS_WORKERS"


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    report = run_experiment(cfg)
    out = Path(args.out)
    export_report(report, out)
    (out / "config.resolved").write_text(serialize_config(cfg), encoding="utf-8")
    print(
        f"final_accuracy={report.final_accuracy:.4f} "
        f"detection_accuracy={report.detection_accuracy:.4f} "
        f"detection={report.detection_status.value} rounds={len(report.rounds)} out={out}"
    )
    return 0


def _run_cell(cell_dir: str, cfg) -> tuple[str, float, float]:
    report = run_experiment(cfg)
    export_report(report, cell_dir)
    return cell_dir, report.final_accuracy, report.detection_accuracy


def _cmd_sweep(args) -> int:
    spec = parse_sweep(args.spec)
    cells = expand_cells(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers or int(os.environ.get(WORKERS_ENV, "1"))

    results: dict[str, tuple[float, float] | None] = {}
    jobs = [(str(out / name), cfg) for name, _, cfg in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_cell, d, c): d for d, c in jobs}
            for future, cell_dir in futures.items():
                try:
                    _, acc, det = future.result()
                    results[cell_dir] = (acc, det)
                except Exception as exc:
                    results[cell_dir] = None
                    _record_cell_failure(cell_dir, exc)
    else:
        for cell_dir, cfg in jobs:
            try:
                _, acc, det = _run_cell(cell_dir, cfg)
                results[cell_dir] = (acc, det)
            except Exception as exc:
                results[cell_dir] = None
                _record_cell_failure(cell_dir, exc)

    _write_aggregate(out, spec, cells, results)
    failed = sum(1 for v in results.values() if v is None)
    print(f"sweep finished: {len(cells) - failed}/{len(cells)} cells ok, aggregate={out / 'aggregate.csv'}")
    return 0 if failed == 0 else 1


def _record_cell_failure(cell_dir: str, exc: Exception) -> None:
    path = Path(cell_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "error.txt").write_text(
        f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}", encoding="utf-8"
    )
    print(f"cell failed: {cell_dir}: {exc}", file=sys.stderr)


def _write_aggregate(out: Path, spec, cells, results: dict) -> None:
    """One row per axis combination, averaging the repeats that succeeded."""
    axis_keys = [k for k, _ in spec.axes]
    by_combo: dict[tuple, list[tuple[float, float] | None]] = {}
    for name, axis_items, _ in cells:
        combo = tuple(v for _, v in axis_items)
        by_combo.setdefault(combo, []).append(results[str(out / name)])
    with open(out / "aggregate.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(axis_keys + ["repeats_ok", "repeats_failed", "mean_final_accuracy", "mean_detection_accuracy"])
        for combo, cell_results in by_combo.items():
            ok = [r for r in cell_results if r is not None]
            mean_acc = sum(r[0] for r in ok) / len(ok) if ok else float("nan")
            mean_det = sum(r[1] for r in ok) / len(ok) if ok else float("nan")
            writer.writerow(
                [str(v.value if hasattr(v, "value") else v) for v in combo]
                + [len(ok), len(cell_results) - len(ok), repr(mean_acc), repr(mean_det)]
            )


def _cmd_inspect(args) -> int:
    directory = Path(args.report_dir)
    metrics = directory / "metrics.jsonl"
    aggregate = directory / "aggregate.csv"
    if metrics.exists():
        rows = [json.loads(line) for line in metrics.read_text(encoding="utf-8").splitlines() if line]
        print(f"{'round':>5}  {'accuracy':>8}  {'loss':>10}  detection")
        stride = max(1, len(rows) // 20)
        for i, row in enumerate(rows):
            if i % stride == 0 or i == len(rows) - 1:
                print(f"{row['round']:>5}  {row['test_accuracy']:>8.4f}  {row['global_loss']:>10.4f}  {row['detection']}")
        summary = directory / "summary.txt"
        if summary.exists():
            print()
            print(summary.read_text(encoding="utf-8"), end="")
        return 0
    if aggregate.exists():
        with open(aggregate, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        for row in rows:
            print("  ".join(cell.ljust(width) for cell, width in zip(row, widths)))
        return 0
    raise FileNotFoundError(f"no metrics.jsonl or aggregate.csv under {directory}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedns", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a single experiment from a config file")
    run_p.add_argument("config", help="path to the experiment config")
    run_p.add_argument("--out", required=True, help="output directory for report files")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run an ablation sweep from a sweep spec")
    sweep_p.add_argument("spec", help="path to the sweep spec")
    sweep_p.add_argument("--out", required=True, help="output directory, one subdirectory per cell")
    sweep_p.add_argument("--workers", type=int, default=0, help=f"parallel cells (default ${WORKERS_ENV} or 1)")
    sweep_p.set_defaults(func=_cmd_sweep)

    inspect_p = sub.add_parser("inspect", help="print a summary table for a report directory")
    inspect_p.add_argument("report_dir")
    inspect_p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
