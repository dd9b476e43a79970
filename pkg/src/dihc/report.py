"""Aggregate finished runs into a comparison table and plot-ready curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from . import metrics as MT
from .trainer import read_runlog

MANIFEST = "manifest.json"
TABLE_COLUMNS = ("run", "labelled_fraction", "seed", "imd", "ms", "dihc", "consistency", "steps",
                 "dice", "jaccard", "asd", "hd95")
CURVE_COLUMNS = ("run", "step", "l_sup", "l_mc", "l_dihc", "lambda_cst", "l_total", "disagreement")


@dataclass
class RunSummary:
    name: str
    config: dict
    rows: list
    final: MT.MetricReport | None


def find_runs(root) -> list:
    """Every directory under ``root`` (inclusive) holding a manifest and a run log."""
    root = Path(root)
    hits = [p.parent for p in sorted(root.rglob(MANIFEST)) if (p.parent / "runlog.csv").is_file()]
    return hits


def load_run(run_dir: Path, root: Path) -> RunSummary:
    manifest = json.loads((run_dir / MANIFEST).read_text())
    rows = read_runlog(run_dir / "runlog.csv")
    final = None
    if (run_dir / "eval.csv").is_file():
        means = [r for r in MT.read_csv(run_dir / "eval.csv") if r.case_id == "mean"]
        final = means[-1] if means else None
    name = run_dir.relative_to(root).as_posix() if run_dir != root else run_dir.name
    return RunSummary(name, manifest["config"], rows, final)


def _flag(v: bool) -> str:
    return "yes" if v else "no"


def _sort_key(r: RunSummary):
    c = r.config
    return (c["labelled_fraction"], not c["enable_consistency"], c["enable_imd"], c["enable_ms"],
            c["enable_dihc"], c["seed"], r.name)


def build_report(runs_dir, out_csv) -> tuple[Path, Path]:
    """Write the table to ``out_csv`` and the curves next to it; returns both paths."""
    root = Path(runs_dir)
    dirs = find_runs(root)
    if not dirs:
        raise FileNotFoundError(f"no runs (manifest.json + runlog.csv) under {root}")
    runs = sorted((load_run(d, root) for d in dirs), key=_sort_key)
    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in runs:
            c, f = r.config, r.final
            scores = ["", "", "", ""] if f is None else [
                MT._fmt(f.dice), MT._fmt(f.jaccard), MT._fmt(f.asd, f.surface_defined), MT._fmt(f.hd95, f.surface_defined)]
            w.writerow([r.name, c["labelled_fraction"], c["seed"], _flag(c["enable_imd"]), _flag(c["enable_ms"]),
                        _flag(c["enable_dihc"]), _flag(c["enable_consistency"]), len(r.rows)] + scores)
    curves = out_csv.with_name(out_csv.stem + "_curves.csv")
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in runs:
            for row in r.rows:
                w.writerow([r.name, row[0]] + [repr(v) for v in row[1:]])
    return out_csv, curves
