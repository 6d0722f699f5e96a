"""Mixed-quality demonstration generator with known regimes, policies and quality.

Each trajectory walks a sticky Markov chain over regimes. Within a regime the
state follows an order-1 autoregression whose stationary covariance is the
inverse of that regime's banded precision, so stacked windows carry genuine
cross-time structure. Every regime run is handed one ground-truth softmax
policy; a demonstrator with quality kappa follows it with probability kappa
and otherwise acts uniformly at random.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logit, softmax
from scipy.stats import spearmanr
from sklearn.metrics import adjusted_rand_score

from . import DataError
from ._util import substream
from .dataset import DatasetManifest, Trajectory
from .ranking import nlg


@dataclass
class GeneratorSpec:
    Q_true: int = 3
    O_true: int = 3
    m: int = 6
    A: int = 3
    N: int = 60
    T_min: int = 100
    T_max: int = 140
    stay_prob: float = 0.99
    transition: list[list[float]] | None = None  # overrides stay_prob when given
    ar_coef: list[float] | None = None  # per-regime AR(1) coefficient
    band: int = 1
    policy_separation: float = 6.0
    policy_affinity: float = 0.7  # P(o = q mod O | regime q); rest spread evenly
    kappa_high: float = 0.95
    kappa_low: float = 0.4
    frac_high: float = 0.5
    qualities: list[float] | None = None  # explicit per-trajectory kappa
    cohorts: list[str] = field(default_factory=lambda: ["S21", "F21", "S22", "F22"])
    mean_gap: float = 10.0
    min_gap: float = 0.5
    z_noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if min(self.Q_true, self.O_true, self.m, self.N) < 1 or self.A < 2:
            raise DataError("invalid generator spec: counts must be positive and A >= 2")
        if not 1 <= self.T_min <= self.T_max:
            raise DataError("invalid generator spec: need 1 <= T_min <= T_max")
        P = self.transition_matrix()
        if P.shape != (self.Q_true, self.Q_true) or np.any(P < 0) or not np.allclose(P.sum(1), 1.0):
            raise DataError("invalid generator spec: transition rows must be distributions")
        ks = self.kappas()
        if np.any(ks <= 0) or np.any(ks > 1):
            raise DataError("invalid generator spec: qualities must lie in (0, 1]")
        if not self.cohorts:
            raise DataError("invalid generator spec: need at least one cohort")
        if self.ar_coef is not None and (len(self.ar_coef) != self.Q_true
                                         or any(abs(c) >= 1 for c in self.ar_coef)):
            raise DataError("invalid generator spec: ar_coef needs Q_true entries in (-1, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown generator spec keys: {sorted(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)

    def transition_matrix(self) -> np.ndarray:
        if self.transition is not None:
            return np.asarray(self.transition, dtype=np.float64)
        Q = self.Q_true
        if Q == 1:
            return np.ones((1, 1))
        P = np.full((Q, Q), (1.0 - self.stay_prob) / (Q - 1))
        np.fill_diagonal(P, self.stay_prob)
        return P

    def kappas(self) -> np.ndarray:
        if self.qualities is not None:
            if len(self.qualities) != self.N:
                raise DataError("invalid generator spec: qualities needs N entries")
            return np.asarray(self.qualities, dtype=np.float64)
        n_high = int(round(self.frac_high * self.N))
        return np.where(_interleave_mask(self.N, n_high), self.kappa_high, self.kappa_low)


def _interleave_mask(N: int, n_high: int) -> np.ndarray:
    # spread high-quality demonstrators evenly so every cohort gets both kinds
    mask = np.zeros(N, dtype=bool)
    if n_high:
        mask[np.floor(np.arange(n_high) * N / n_high).astype(int)] = True
    return mask


@dataclass
class GroundTruth:
    regimes: dict[str, list[int]]
    policies: dict[str, list[int]]  # per-step policy id (constant on regime runs)
    kappa: dict[str, float]
    z: dict[str, float]
    regime_precisions: list[list[list[float]]]
    policy_weights: list[list[list[float]]]
    policy_biases: list[list[float]]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "GroundTruth":
        return cls(**dict(d))


def _banded_precision(rng: np.random.Generator, m: int, band: int) -> np.ndarray:
    P = np.eye(m)
    for k in range(1, band + 1):
        vals = rng.uniform(0.2, 0.45, size=m - k) * rng.choice([-1.0, 1.0], size=m - k) / band
        P += np.diag(vals, k) + np.diag(vals, -k)
    scale = np.exp(rng.uniform(-1.0, 1.0, size=m))
    return P * np.sqrt(np.outer(scale, scale))


def _model_params(spec: GeneratorSpec):
    rng = substream(spec.seed, "model")
    precs = [_banded_precision(rng, spec.m, spec.band) for _ in range(spec.Q_true)]
    if spec.ar_coef is not None:
        phis = list(spec.ar_coef)
    else:
        phis = list(np.linspace(-0.5, 0.8, spec.Q_true)) if spec.Q_true > 1 else [0.5]
        rng.shuffle(phis)
    W = rng.normal(size=(spec.O_true, spec.A, spec.m)) * spec.policy_separation / np.sqrt(spec.m)
    b = rng.normal(size=(spec.O_true, spec.A))
    O, Q = spec.O_true, spec.Q_true
    if O == 1:
        affinity = np.ones((Q, 1))
    else:
        affinity = np.full((Q, O), (1.0 - spec.policy_affinity) / (O - 1))
        affinity[np.arange(Q), np.arange(Q) % O] = spec.policy_affinity
    return precs, np.asarray(phis, dtype=np.float64), W, b, affinity


def _trajectory(spec: GeneratorSpec, n: int, tid: str, cohort: str, kappa: float, params):
    precs, phis, W, b, affinity = params
    rng = substream(spec.seed, "trajectory", tid)
    P = spec.transition_matrix()
    T = int(rng.integers(spec.T_min, spec.T_max + 1))
    covs = [np.linalg.inv(p) for p in precs]
    chols = [np.linalg.cholesky(c) for c in covs]

    regimes = np.empty(T, dtype=np.int64)
    regimes[0] = rng.choice(spec.Q_true)
    for t in range(1, T):
        regimes[t] = rng.choice(spec.Q_true, p=P[regimes[t - 1]])

    x = np.empty((T, spec.m))
    x[0] = chols[regimes[0]] @ rng.normal(size=spec.m)
    for t in range(1, T):
        q = regimes[t]
        phi = phis[q]
        x[t] = phi * x[t - 1] + np.sqrt(1.0 - phi * phi) * (chols[q] @ rng.normal(size=spec.m))

    policies = np.empty(T, dtype=np.int64)
    run_start = 0
    for t in range(1, T + 1):
        if t == T or regimes[t] != regimes[run_start]:
            policies[run_start:t] = rng.choice(spec.O_true, p=affinity[regimes[run_start]])
            run_start = t

    actions = np.empty(T, dtype=np.int64)
    for t in range(T):
        o = policies[t]
        if rng.random() < kappa:
            actions[t] = rng.choice(spec.A, p=softmax(W[o] @ x[t] + b[o]))
        else:
            actions[t] = rng.integers(spec.A)

    gaps = spec.min_gap + rng.exponential(spec.mean_gap, size=T - 1)
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    z = float(logit(min(kappa, 1 - 1e-6)) + spec.z_noise * rng.normal())
    pre = float(rng.uniform(0.1, 0.6))
    gain = 1.0 / (1.0 + np.exp(-z)) - 0.5
    post = float(np.clip(pre + gain * (1.0 - pre), 0.0, 1.0))
    traj = Trajectory(tid, cohort, times, x, actions, np.ones(T), pretest=pre, posttest=post)
    return traj, regimes, policies, z


def generate(spec: GeneratorSpec) -> tuple[DatasetManifest, GroundTruth]:
    """Sample a dataset and its ground truth; identical seeds give identical bytes."""
    params = _model_params(spec)
    kappas = spec.kappas()
    trajs, truth_r, truth_p, truth_k, truth_z = [], {}, {}, {}, {}
    for n in range(spec.N):
        cohort = spec.cohorts[n % len(spec.cohorts)]
        tid = f"{cohort}-{n:04d}"
        tr, reg, pol, z = _trajectory(spec, n, tid, cohort, float(kappas[n]), params)
        trajs.append(tr)
        truth_r[tid] = reg.tolist()
        truth_p[tid] = pol.tolist()
        truth_k[tid] = float(kappas[n])
        truth_z[tid] = z
    d = DatasetManifest(spec.m, spec.A, trajs).validate()

    if np.ptp(kappas) > 0 and spec.N >= 3:
        gains = [nlg(tr.pretest, tr.posttest) for tr in trajs]
        rc = spearmanr(gains, kappas).statistic
        if not rc >= 0.8:
            raise DataError(f"quality signal too noisy: rank correlation {rc:.3f} < 0.8")

    precs, _, W, b, _ = params
    truth = GroundTruth(truth_r, truth_p, truth_k, truth_z,
                        [p.tolist() for p in precs], W.tolist(), b.tolist())
    return d, truth


@dataclass
class RecoveryReport:
    segmentation_accuracy: float
    policy_ari: float
    n_steps: int


def matched_accuracy(true: Sequence[int], pred: Sequence[int]) -> float:
    """Fraction of agreeing labels under the best one-to-one relabelling of ``pred``."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise DataError("label sequences differ in length")
    if true.size == 0:
        return 1.0
    C = np.zeros((pred.max() + 1, true.max() + 1))
    np.add.at(C, (pred, true), 1)
    rows, cols = linear_sum_assignment(-C)
    return float(C[rows, cols].sum() / true.size)


def score_recovery(truth: GroundTruth, assignments: Mapping[str, Sequence[int]],
                   policy_labels: Mapping[str, Sequence[int]]) -> RecoveryReport:
    """Matched step accuracy of segmentation and ARI of per-step policy-cluster labels.

    ``policy_labels`` gives, per trajectory, the hard policy label of the
    segment containing each step (one entry per step).
    """
    ids = [i for i in truth.regimes if i in assignments]
    if not ids:
        raise DataError("no overlapping trajectories between truth and assignments")
    t_reg, p_reg, t_pol, p_pol = [], [], [], []
    for i in ids:
        if len(assignments[i]) != len(truth.regimes[i]) or len(policy_labels[i]) != len(truth.policies[i]):
            raise DataError(f"trajectory {i!r}: label length mismatch")
        t_reg.extend(truth.regimes[i])
        p_reg.extend(assignments[i])
        t_pol.extend(truth.policies[i])
        p_pol.extend(policy_labels[i])
    return RecoveryReport(matched_accuracy(t_reg, p_reg),
                          float(adjusted_rand_score(t_pol, p_pol)), len(t_reg))


def default_benchmark(seed: int = 0) -> GeneratorSpec:
    return GeneratorSpec(seed=seed)
