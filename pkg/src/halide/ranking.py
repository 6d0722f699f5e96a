"""Learning-gain quality signals, expert selection and decision weights."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import DataError
from .dataset import DatasetManifest

GROUPS = ("low", "medium", "high")


class DegenerateSignalWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QualitySignal:
    trajectory_id: str
    z_raw: float
    z_std: float


@dataclass(frozen=True)
class QLGLabel:
    trajectory_id: str
    label: str  # "High" | "Low"
    pre_group: str
    post_group: str


def nlg(pretest: float, posttest: float) -> float:
    """Normalized learning gain ``(post - pre) / sqrt(1 - pre)`` for scores in [0, 1]."""
    if not 0.0 <= pretest < 1.0:
        if pretest == 1.0:
            raise DataError("NLG undefined for pretest = 1 (zero headroom)")
        raise DataError(f"pretest {pretest} outside [0, 1)")
    if not 0.0 <= posttest <= 1.0:
        raise DataError(f"posttest {posttest} outside [0, 1]")
    return (posttest - pretest) / math.sqrt(1.0 - pretest)


def standardize(values: Sequence[float]) -> tuple[np.ndarray, bool]:
    """Population z-scores. Returns ``(z, degenerate)``.

    A zero-variance input yields all zeros and ``degenerate=True`` (a
    :class:`DegenerateSignalWarning` is also emitted).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DataError("standardize needs at least 2 values")
    sd = v.std()
    # equal inputs can leave a rounding-level spread; treat it as zero
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, float(np.max(np.abs(v)))):
        warnings.warn("quality signal has zero variance; weights collapse to 0.5",
                      DegenerateSignalWarning, stacklevel=2)
        return np.zeros_like(v), True
    return (v - v.mean()) / sd, False


def weight_map(z_std, alpha: float = 1.0):
    """Sigmoid importance weight ``1 / (1 + exp(-alpha * z))``; vectorised."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    z = np.asarray(z_std, dtype=np.float64)
    # keep strictly positive so the result is always a valid decision weight
    out = np.maximum(expit(alpha * z), np.finfo(np.float64).tiny)
    return float(out) if out.ndim == 0 else out


def tercile_cutpoints(scores: Iterable[float]) -> tuple[float, float]:
    s = np.asarray(list(scores), dtype=np.float64)
    c1, c2 = np.quantile(s, [1 / 3, 2 / 3])
    return float(c1), float(c2)


def performance_group(score: float, cutpoints: tuple[float, float]) -> str:
    c1, c2 = cutpoints
    if score < c1:
        return "low"
    if score < c2:
        return "medium"
    return "high"


def qlg_label(pretest: float, posttest: float, thresholds: tuple[float, float],
              trajectory_id: str = "") -> QLGLabel:
    """High when the group improved or stayed high; Low when it fell or stayed low/medium."""
    pre = performance_group(pretest, thresholds)
    post = performance_group(posttest, thresholds)
    up = GROUPS.index(post) > GROUPS.index(pre)
    stay_high = pre == post == "high"
    return QLGLabel(trajectory_id, "High" if (up or stay_high) else "Low", pre, post)


def partition_expert(d: DatasetManifest, labels: Iterable[QLGLabel]) -> tuple[list[str], list[str]]:
    by_id = {lab.trajectory_id: lab.label for lab in labels}
    missing = [tid for tid in d.ids if tid not in by_id]
    if missing:
        raise DataError(f"unlabeled trajectories: {missing[:5]}")
    expert = [tid for tid in d.ids if by_id[tid] == "High"]
    imperfect = [tid for tid in d.ids if by_id[tid] != "High"]
    return expert, imperfect


@dataclass(frozen=True)
class RankingRecord:
    id: str
    nlg: float
    z: float
    weight: float
    qlg: str

    def to_json(self) -> dict:
        return {"id": self.id, "nlg": self.nlg, "z": self.z, "weight": self.weight, "qlg": self.qlg}


def parse_groups(spec: str, pretests: Sequence[float]) -> tuple[float, float]:
    """``"terciles"`` (of the pooled pre-test scores) or ``"fixed:c1,c2"``."""
    if spec == "terciles":
        return tercile_cutpoints(pretests)
    if spec.startswith("fixed:"):
        parts = spec[len("fixed:"):].split(",")
        if len(parts) != 2:
            raise ValueError(f"bad group spec {spec!r}")
        c1, c2 = float(parts[0]), float(parts[1])
        if not c1 <= c2:
            raise ValueError("cutpoints must be ordered")
        return c1, c2
    raise ValueError(f"bad group spec {spec!r}")


def rank_dataset(d: DatasetManifest, alpha: float = 1.0, groups: str = "terciles") -> list[RankingRecord]:
    """NLG, standardized NLG, sigmoid weight and QLG label for every trajectory.

    Standardization pools all cohorts. Every trajectory needs pre- and post-test scores.
    """
    missing = [tr.id for tr in d if tr.pretest is None or tr.posttest is None]
    if missing:
        raise DataError(f"trajectories without pre/post test scores: {missing[:5]}")
    gains = [nlg(tr.pretest, tr.posttest) for tr in d]
    z, _ = standardize(gains)
    w = weight_map(z, alpha)
    cuts = parse_groups(groups, [tr.pretest for tr in d])
    out = []
    for tr, g, zi, wi in zip(d, gains, z, np.atleast_1d(w)):
        lab = qlg_label(tr.pretest, tr.posttest, cuts, tr.id)
        out.append(RankingRecord(tr.id, float(g), float(zi), float(wi), lab.label))
    return out
