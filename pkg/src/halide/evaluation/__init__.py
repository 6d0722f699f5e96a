from .folds import CohortOrderWarning, Fold, cohort_key, order_cohorts, temporal_folds
from .grid import (GridReport, evaluate_grid, read_predictions, sibling_path, write_cd_csv,
                   write_predictions, write_report_csv)
from .metrics import (METRIC_NAMES, Metrics, average_precision_binary, compute_metrics,
                      metrics_from_records, roc_auc_binary, summarize)
from .stats import FriedmanResult, friedman_conover, holm_adjust, letter_groups, within_block_ranks

__all__ = [
    "CohortOrderWarning", "Fold", "FriedmanResult", "GridReport", "METRIC_NAMES", "Metrics",
    "average_precision_binary", "cohort_key", "compute_metrics", "evaluate_grid",
    "friedman_conover", "holm_adjust", "letter_groups", "metrics_from_records", "order_cohorts",
    "read_predictions", "roc_auc_binary", "sibling_path", "summarize", "temporal_folds",
    "within_block_ranks", "write_cd_csv", "write_predictions", "write_report_csv",
]
