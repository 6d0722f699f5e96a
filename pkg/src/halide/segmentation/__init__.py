from .ticc import (SegmentationConfig, SubTrajectory, TiccResult, assignment_cost,
                   consistency_penalty, cut_subtrajectories, dp_assign, labels_from_segments,
                   median_gap, rmt_ticc_fit)
from .toeplitz import (ToeplitzClusterModel, empirical_cov, glasso_objective, toeplitz_glasso,
                       toeplitz_violation, window_nll)

__all__ = [
    "SegmentationConfig", "SubTrajectory", "TiccResult", "ToeplitzClusterModel",
    "assignment_cost", "consistency_penalty", "cut_subtrajectories", "dp_assign",
    "empirical_cov", "glasso_objective", "labels_from_segments", "median_gap",
    "rmt_ticc_fit", "toeplitz_glasso", "toeplitz_violation", "window_nll",
]
