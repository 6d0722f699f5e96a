"""Reward-regulated, time-aware Toeplitz inverse-covariance clustering."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .. import DataError
from .._util import ordered_map, substream
from ..dataset import DatasetManifest, Trajectory, window_matrix
from .toeplitz import (RIDGE, ToeplitzClusterModel, empirical_cov, offdiag_l1,
                       toeplitz_glasso, window_nll)

log = logging.getLogger(__name__)


@dataclass
class SegmentationConfig:
    Q: int = 3
    omega: int = 3
    lambda_seg: float = 0.11
    # Switch penalty scale. With beta_relative the effective penalty is
    # beta * (mean |window NLL| per window dimension) after the first fit.
    beta: float = 20.0
    beta_relative: bool = True
    tau: float | None = None  # None -> median positive time gap of the data
    reward_sign: float = 1.0  # +1: higher regulated reward strengthens consistency
    admm_rho: float = 1.0
    admm_tol: float = 1e-5
    admm_max_iter: int = 1000
    max_ticc_iter: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if self.omega < 1:
            raise ValueError("omega must be >= 1")
        for name in ("lambda_seg", "beta", "admm_rho", "admm_tol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown segmentation config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SubTrajectory:
    owner: str
    start: int
    end: int  # exclusive
    high_state: int
    states: np.ndarray
    actions: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class TiccResult:
    models: list[ToeplitzClusterModel]
    assignments: dict[str, np.ndarray]
    beta: float  # effective switch penalty scale
    tau: float
    iterations: int
    converged: bool
    objective_history: list[float] = field(default_factory=list)
    rescued_rounds: list[int] = field(default_factory=list)


def consistency_penalty(prev_q, q, dt: float, r_bar: float, beta: float, tau: float,
                        reward_sign: float = 1.0) -> float:
    """Cost of moving from cluster ``prev_q`` to ``q`` across a gap of ``dt`` seconds.

    Zero without a switch or without a predecessor (``prev_q is None``).
    Otherwise ``beta * exp(-dt / tau) * (1 + reward_sign * r_bar)``.
    """
    if prev_q is None or prev_q == q:
        return 0.0
    return beta * math.exp(-dt / tau) * (1.0 + reward_sign * r_bar)


def _switch_costs(dt, r_bar, beta, tau, reward_sign) -> np.ndarray:
    # scalar math keeps every term bit-identical to consistency_penalty
    return np.array([consistency_penalty(0, 1, float(g), float(r), beta, tau, reward_sign)
                     for g, r in zip(dt, r_bar)])


def dp_assign(nll: np.ndarray, dt: np.ndarray, r_bar: np.ndarray | None, beta: float, tau: float,
              reward_sign: float = 1.0) -> np.ndarray:
    """Exact minimum-cost labelling of one trajectory's windows.

    ``nll`` is (T, Q); window t pays ``nll[t, q_t]`` plus the switch penalty
    from ``q_{t-1}``. Ties go to the lower cluster id, both in back-pointers
    and in the final state.
    """
    nll = np.asarray(nll, dtype=np.float64)
    T, Q = nll.shape
    if r_bar is None:
        r_bar = np.ones(T)
    pen = _switch_costs(dt, r_bar, beta, tau, reward_sign)
    off = 1.0 - np.eye(Q)
    back = np.zeros((T, Q), dtype=np.int64)
    V = nll[0].copy()
    for t in range(1, T):
        cand = V[:, None] + pen[t] * off  # (prev, next)
        back[t] = np.argmin(cand, axis=0)
        V = cand[back[t], np.arange(Q)] + nll[t]
    labels = np.empty(T, dtype=np.int64)
    labels[-1] = int(np.argmin(V))
    for t in range(T - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    return labels


def assignment_cost(nll: np.ndarray, labels: Sequence[int], dt, r_bar, beta, tau, reward_sign=1.0) -> float:
    total = float(nll[0, labels[0]])
    for t in range(1, len(labels)):
        total = total + consistency_penalty(int(labels[t - 1]), int(labels[t]), float(dt[t]),
                                            float(r_bar[t]) if r_bar is not None else 1.0,
                                            beta, tau, reward_sign)
        total = total + float(nll[t, labels[t]])
    return total


def cut_subtrajectories(traj: Trajectory, assignment: Sequence[int]) -> list[SubTrajectory]:
    """Split into maximal runs of constant cluster id."""
    q = np.asarray(assignment)
    if len(q) != len(traj):
        raise DataError(f"assignment length {len(q)} != trajectory length {len(traj)}")
    cuts = np.flatnonzero(np.diff(q)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(q)]])
    return [SubTrajectory(traj.id, int(s), int(e), int(q[s]), traj.states[s:e],
                          traj.actions[s:e], traj.weights[s:e])
            for s, e in zip(starts, ends)]


def labels_from_segments(segments: Sequence[SubTrajectory]) -> np.ndarray:
    out = np.empty(segments[-1].end if segments else 0, dtype=np.int64)
    for seg in segments:
        out[seg.start:seg.end] = seg.high_state
    return out


def median_gap(d: DatasetManifest) -> float:
    gaps = np.concatenate([np.diff(tr.times) for tr in d] or [np.zeros(0)])
    gaps = gaps[gaps > 0]
    return float(np.median(gaps)) if gaps.size else 1.0


def _model_cost(model: ToeplitzClusterModel, S: np.ndarray, n: int, lam: float) -> float:
    # n/2 [tr(S theta) - logdet + lam*|theta|_off]; S already carries the ridge
    return 0.5 * n * (float(np.sum(S * model.theta)) - model.logdet + lam * offdiag_l1(model.theta))


class _Windows:
    """All trajectories' windows stacked in dataset order, with per-trajectory slices."""

    def __init__(self, d: DatasetManifest, omega: int):
        mats, gaps, self.slices, self.ids = [], [], [], []
        start = 0
        for tr in d:
            X, dt = window_matrix(tr.states, tr.times, omega)
            mats.append(X)
            gaps.append(dt)
            self.slices.append(slice(start, start + len(X)))
            self.ids.append(tr.id)
            start += len(X)
        self.X = np.concatenate(mats) if mats else np.zeros((0, d.state_dim * omega))
        self.dt = np.concatenate(gaps) if gaps else np.zeros(0)

    def __len__(self):
        return len(self.X)


def ticc_objective(W: _Windows, models, labels, r_bar_all, beta, tau, lam, reward_sign=1.0) -> float:
    """Total window NLL + switch penalties + per-cluster (n_q/2)(lam |theta|_off + ridge tr theta)."""
    total = 0.0
    nll = np.column_stack([window_nll(W.X, mdl) for mdl in models])
    for sl in W.slices:
        total += assignment_cost(nll[sl], labels[sl], W.dt[sl], r_bar_all[sl], beta, tau, reward_sign)
    for q, mdl in enumerate(models):
        n = int(np.sum(labels == q))
        total += 0.5 * n * (lam * offdiag_l1(mdl.theta) + RIDGE * float(np.trace(mdl.theta)))
    return total


def rmt_ticc_fit(d: DatasetManifest, cfg: SegmentationConfig,
                 r_bar: Mapping[str, np.ndarray] | None = None, threads: int = 1,
                 hook: Callable[[str], None] | None = None) -> TiccResult:
    """Alternate exact DP assignment and per-cluster Toeplitz glasso refits.

    ``d`` must already be centered. ``r_bar`` maps trajectory id to per-step
    regulated reward in [0, 1]; missing means 1 everywhere. Decision weights
    in ``d`` are never read.
    """
    if hook:
        hook("segmentation")
    W = _Windows(d, cfg.omega)
    if cfg.Q > len(W):
        raise DataError(f"Q={cfg.Q} exceeds the number of windows ({len(W)})")
    tau = cfg.tau if cfg.tau is not None else median_gap(d)
    r_all = np.concatenate([np.asarray(r_bar[i], dtype=np.float64) if r_bar and i in r_bar
                            else np.ones(sl.stop - sl.start) for i, sl in zip(W.ids, W.slices)])
    dim = W.X.shape[1]

    if cfg.Q == 1:
        labels = np.zeros(len(W), dtype=np.int64)
    else:
        rng = substream(cfg.seed, "ticc-init")
        km = KMeans(n_clusters=cfg.Q, init="k-means++", n_init=1,
                    random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(W.X).astype(np.int64)

    models: list[ToeplitzClusterModel | None] = [None] * cfg.Q
    beta_eff = None
    history: list[float] = []
    rescued: list[int] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_ticc_iter + 1):
        labels, did_rescue = _rescue_empty(W.X, labels, models, cfg.Q)
        if did_rescue:
            rescued.append(it)
        models = _fit_models(W.X, labels, models, cfg, threads)
        if beta_eff is None:
            beta_eff = _effective_beta(W.X, labels, models, cfg, dim)
        nll = np.column_stack([window_nll(W.X, mdl) for mdl in models])
        history.append(ticc_objective(W, models, labels, r_all, beta_eff, tau, cfg.lambda_seg, cfg.reward_sign))
        new = np.concatenate(ordered_map(
            lambda sl: dp_assign(nll[sl], W.dt[sl], r_all[sl], beta_eff, tau, cfg.reward_sign),
            W.slices, threads))
        history.append(ticc_objective(W, models, new, r_all, beta_eff, tau, cfg.lambda_seg, cfg.reward_sign))
        if np.array_equal(new, labels):
            converged = True
            break
        labels = new
    else:
        # keep models consistent with the returned labels
        labels, _ = _rescue_empty(W.X, labels, models, cfg.Q)
        models = _fit_models(W.X, labels, models, cfg, threads)

    log.debug("ticc finished after %d rounds (converged=%s)", it, converged)
    assignments = {i: labels[sl].copy() for i, sl in zip(W.ids, W.slices)}
    return TiccResult(list(models), assignments, float(beta_eff), float(tau), it, converged,
                      history, rescued)


def _effective_beta(X, labels, models, cfg: SegmentationConfig, dim: int) -> float:
    if not cfg.beta_relative:
        return float(cfg.beta)
    own = np.empty(len(X))
    for q, mdl in enumerate(models):
        idx = labels == q
        if idx.any():
            own[idx] = window_nll(X[idx], mdl)
    return float(cfg.beta * np.mean(np.abs(own)) / dim)


def _fit_models(X, labels, prev, cfg: SegmentationConfig, threads: int):
    dim = X.shape[1]

    def fit(q):
        idx = labels == q
        S = empirical_cov(X[idx])
        init = prev[q].theta if prev[q] is not None else None
        new = toeplitz_glasso(S, cfg.lambda_seg, cfg.omega, cfg.admm_rho, cfg.admm_tol,
                              cfg.admm_max_iter, init=init)
        if prev[q] is not None and prev[q].dim == dim:
            n = int(idx.sum())
            # never accept a refit that is worse than the incumbent on this cluster's data
            if _model_cost(prev[q], S, n, cfg.lambda_seg) < _model_cost(new, S, n, cfg.lambda_seg):
                return prev[q]
        return new

    return ordered_map(fit, range(cfg.Q), threads)


def _rescue_empty(X, labels, models, Q):
    """Refill empty clusters by splitting the largest one at its median own-NLL."""
    labels = labels.copy()
    did = False
    for q in range(Q):
        if np.any(labels == q):
            continue
        did = True
        counts = np.bincount(labels, minlength=Q)
        big = int(np.argmax(counts))
        idx = np.flatnonzero(labels == big)
        if len(idx) < 2:
            raise DataError("cannot rescue empty cluster: not enough windows")
        if models[big] is not None:
            score = window_nll(X[idx], models[big])
        else:
            score = np.einsum("ij,ij->i", X[idx], X[idx])
        order = np.argsort(score, kind="stable")
        labels[idx[order[len(idx) // 2:]]] = q
    return labels, did
