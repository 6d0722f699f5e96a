"""Aggregate per-(method, fold) prediction files into the metric table and rank statistics."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import DataError
from .metrics import METRIC_NAMES, Metrics, metrics_from_records, summarize
from .stats import FriedmanResult, friedman_conover

REPORT_COLUMNS = ("method", "fold") + METRIC_NAMES
CD_COLUMNS = ("method", "mean_rank", "group")
_FOLD_RE = re.compile(r"^fold(\d+)\.jsonl$")


@dataclass
class GridReport:
    methods: list[str]
    folds: list[str]
    per_fold: dict[str, list[Metrics]]
    mean: dict[str, dict[str, float]] = field(default_factory=dict)
    std: dict[str, dict[str, float]] = field(default_factory=dict)
    tests: dict[str, FriedmanResult] = field(default_factory=dict)

    def table(self, metric: str) -> np.ndarray:
        return np.array([[getattr(m, metric) for m in self.per_fold[name]] for name in self.methods])

    def summary_rows(self) -> list[dict]:
        """One row per method with mean and std of every metric."""
        return [{"method": m, **{f"{k}_mean": self.mean[m][k] for k in METRIC_NAMES},
                 **{f"{k}_std": self.std[m][k] for k in METRIC_NAMES}} for m in self.methods]


def read_predictions(path) -> list[dict]:
    recs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                recs.append({"action": int(rec["action"]), "probs": rec["probs"]})
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: line {lineno}: bad prediction record ({exc})") from exc
    return recs


def write_predictions(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def discover(preds_dir, order: Sequence[str] = ()) -> tuple[list[str], list[str]]:
    """Methods (sub-directories) and the fold files every one of them must contain."""
    root = Path(preds_dir)
    if not root.is_dir():
        raise DataError(f"{root}: prediction directory not found")
    found = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not found:
        raise DataError(f"{root}: no method directories")
    methods = [m for m in order if m in found] + [m for m in found if m not in order]
    fold_sets = {m: sorted((p.name for p in (root / m).iterdir() if _FOLD_RE.match(p.name)),
                           key=lambda s: int(_FOLD_RE.match(s).group(1))) for m in methods}
    folds = fold_sets[methods[0]]
    for m in methods:
        if fold_sets[m] != folds:
            missing = sorted(set(folds) ^ set(fold_sets[m]))
            raise DataError(f"{root / m}: fold files differ from {methods[0]}: {missing}")
    if not folds:
        raise DataError(f"{root}: no fold<k>.jsonl files")
    return methods, [f[:-len(".jsonl")] for f in folds]


def evaluate_grid(preds_dir, order: Sequence[str] = (), alpha: float = 0.05) -> GridReport:
    methods, folds = discover(preds_dir, order)
    root = Path(preds_dir)
    per_fold = {m: [metrics_from_records(read_predictions(root / m / f"{f}.jsonl")) for f in folds]
                for m in methods}
    rep = GridReport(methods, folds, per_fold)
    for m in methods:
        rep.mean[m], rep.std[m] = summarize(per_fold[m])
    if len(methods) >= 2 and len(folds) >= 2:
        for metric in ("f1", "jaccard"):
            rep.tests[metric] = friedman_conover(rep.table(metric), methods, alpha)
    return rep


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.6f}"


def write_report_csv(rep: GridReport, path) -> None:
    """Per-(method, fold) rows, then a ``mean`` and a ``std`` row per method."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for m in rep.methods:
            for f, met in zip(rep.folds, rep.per_fold[m]):
                w.writerow([m, f] + [_fmt(v) for v in met.values()])
        for m in rep.methods:
            w.writerow([m, "mean"] + [_fmt(rep.mean[m][k]) for k in METRIC_NAMES])
            w.writerow([m, "std"] + [_fmt(rep.std[m][k]) for k in METRIC_NAMES])


def write_cd_csv(res: FriedmanResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CD_COLUMNS)
        for m, r, g in res.cd_rows():
            w.writerow([m, _fmt(r), g])


def sibling_path(path, tag: str) -> Path:
    """``cd.csv`` -> ``cd_<tag>.csv``."""
    p = Path(path)
    return p.with_name(f"{p.stem}_{tag}{p.suffix}")
