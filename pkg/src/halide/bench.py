"""Temporal-fold benchmark: train every grid configuration per fold and write predictions."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

from ._util import ordered_map
from .dataset import DatasetManifest
from .evaluation import GridReport, evaluate_grid, temporal_folds, write_predictions
from .pipeline import METHODS, RunConfig, grid_configs, halide_fit, predict_dataset
from .ranking import rank_dataset

log = logging.getLogger(__name__)


def run_bench(d: DatasetManifest, base: RunConfig, outdir, threads: int = 1,
              methods: Sequence[str] | None = None) -> GridReport:
    """Write ``<outdir>/preds/<method>/fold<k>.jsonl`` for every method and fold, then evaluate.

    Ranking signals are recomputed on each fold's training cohorts only, so no
    test-cohort outcome reaches training.
    """
    d.validate()
    folds = temporal_folds(d)
    names = METHODS if methods is None else [m for m in METHODS if m in methods]
    cfgs = grid_configs(base)
    preds = Path(outdir) / "preds"
    for name in names:
        (preds / name).mkdir(parents=True, exist_ok=True)

    rankings = [rank_dataset(d.subset(f.train_ids), base.alpha, base.groups) for f in folds]
    jobs = [(f, name) for f in folds for name in names]

    def job(item):
        fold, name = item
        model = halide_fit(d.subset(fold.train_ids), rankings[fold.index], cfgs[name])
        recs = predict_dataset(model, d.subset(fold.test_ids))
        write_predictions(preds / name / f"fold{fold.index}.jsonl", recs)
        log.info(json.dumps({"event": "bench_job", "method": name, "fold": fold.index,
                             "test_cohort": fold.test_cohort, "records": len(recs)}))
        return name

    ordered_map(job, jobs, threads)
    return evaluate_grid(preds, order=names)
