"""Outer training loop, the baseline/ablation grid and causal test-time prediction."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import DataError, __version__
from ._util import content_hash
from .dataset import DatasetManifest, Trajectory, center_states, window_matrix
from .policy import EMConfig, MixtureState, em_edm_fit
from .ranking import RankingRecord, rank_dataset
from .regulator import HighLevelModel, build_high_level, distribute_reward, maxent_irl_fit
from .segmentation import (SegmentationConfig, SubTrajectory, ToeplitzClusterModel,
                           cut_subtrajectories, rmt_ticc_fit, window_nll)
from .segmentation.ticc import _switch_costs

log = logging.getLogger(__name__)

DATA_AXES = ("expert_only", "expert_plus_imperfect")
WEIGHT_AXES = ("uniform", "ranked")
HIERARCHY_AXES = ("flat", "hierarchical")


@dataclass
class RunConfig:
    data_axis: str = "expert_plus_imperfect"
    weight_axis: str = "ranked"
    hierarchy_axis: str = "hierarchical"
    K: int = 3
    seg: SegmentationConfig = field(default_factory=SegmentationConfig)
    em: EMConfig = field(default_factory=EMConfig)
    alpha: float = 1.0
    groups: str = "terciles"
    irl_gamma: float = 0.95
    irl_steps: int = 200
    irl_lr: float = 0.1
    seed: int = 0  # overrides seg.seed and em.seed

    def __post_init__(self):
        if isinstance(self.seg, Mapping):
            self.seg = SegmentationConfig.from_dict(self.seg)
        if isinstance(self.em, Mapping):
            self.em = EMConfig.from_dict(self.em)
        for name, allowed in (("data_axis", DATA_AXES), ("weight_axis", WEIGHT_AXES),
                              ("hierarchy_axis", HIERARCHY_AXES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def flat(self) -> bool:
        return self.hierarchy_axis == "flat"

    def effective(self) -> "RunConfig":
        """Config with the axis constraints and the global seed applied."""
        seg, em, K = replace(self.seg, seed=self.seed), replace(self.em, seed=self.seed), self.K
        if self.flat:
            seg, em, K = replace(seg, Q=1), replace(em, O=1), 1
        return replace(self, seg=seg, em=em, K=K)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seg"], out["em"] = self.seg.to_dict(), self.em.to_dict()
        return out

    def hash(self) -> str:
        return content_hash(self.effective().to_dict())


@dataclass
class TrainedModel:
    config: RunConfig
    state_dim: int
    num_actions: int
    mean: np.ndarray
    mixture: MixtureState
    seg_models: list[ToeplitzClusterModel] = field(default_factory=list)
    beta: float = 0.0
    tau: float = 1.0
    regulator: HighLevelModel | None = None
    train_ids: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def flat(self) -> bool:
        return not self.seg_models

    def to_json(self) -> dict:
        return {
            "version": __version__,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "state_dim": self.state_dim,
            "num_actions": self.num_actions,
            "mean": self.mean.tolist(),
            "mixture": self.mixture.to_json(),
            "segmentation": {"models": [m.to_json() for m in self.seg_models],
                             "beta": self.beta, "tau": self.tau,
                             "omega": self.config.seg.omega},
            "regulator": self.regulator.to_json() if self.regulator is not None else None,
            "train_ids": list(self.train_ids),
            "history": self.history,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainedModel":
        cfg = RunConfig.from_dict(d["config"])
        seg = d["segmentation"]
        reg = HighLevelModel.from_json(d["regulator"]) if d.get("regulator") else None
        model = cls(cfg, int(d["state_dim"]), int(d["num_actions"]), np.array(d["mean"], dtype=np.float64),
                    MixtureState.from_json(d["mixture"]),
                    [ToeplitzClusterModel.from_json(m) for m in seg["models"]],
                    float(seg["beta"]), float(seg["tau"]), reg, list(d.get("train_ids", [])),
                    list(d.get("history", [])))
        if d.get("config_hash") and d["config_hash"] != cfg.hash():
            raise DataError("model config hash does not match its config")
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        try:
            with open(path) as fh:
                return cls.from_json(json.load(fh))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: not a model file ({exc})") from exc


def _training_view(d: DatasetManifest, ranking: Sequence[RankingRecord] | None,
                   cfg: RunConfig) -> tuple[DatasetManifest, bool]:
    """Apply the data and weight axes. Returns the dataset and whether weights are unit."""
    recs = {r.id: r for r in ranking} if ranking is not None else None
    if cfg.data_axis == "expert_only":
        if recs is None:
            raise DataError("expert_only needs ranking records to select experts")
        missing = [tid for tid in d.ids if tid not in recs]
        if missing:
            raise DataError(f"no ranking record for {missing[:5]}")
        d = d.subset([tid for tid in d.ids if recs[tid].qlg == "High"])
        if len(d) == 0:
            raise DataError("no expert (High QLG) trajectories to train on")
    if cfg.weight_axis == "uniform":
        return d, True
    if recs is None:
        return d, False  # use the weights stored with the steps
    missing = [tid for tid in d.ids if tid not in recs]
    if missing:
        raise DataError(f"no ranking record for {missing[:5]}")
    trajs = [tr.with_weights(np.full(len(tr), recs[tr.id].weight)) for tr in d]
    return DatasetManifest(d.state_dim, d.num_actions, trajs), False


def _whole(tr: Trajectory) -> SubTrajectory:
    return SubTrajectory(tr.id, 0, len(tr), 0, tr.states, tr.actions, tr.weights)


def halide_fit(d: DatasetManifest, ranking: Sequence[RankingRecord] | None, cfg: RunConfig,
               threads: int = 1, hook: Callable[[str], None] | None = None) -> TrainedModel:
    """Train one configuration.

    ``ranking`` supplies the per-trajectory weight and QLG label; ``None``
    bypasses ranking entirely (step weights come from the data). ``hook`` is
    called with ``"segmentation"`` and ``"regulator"`` whenever those stages run.
    """
    d.validate()
    eff = cfg.effective()
    train, unit = _training_view(d, ranking, eff)
    dc, mean = center_states(train)
    m, A = dc.state_dim, dc.num_actions

    if eff.flat:
        segs = [_whole(tr) for tr in dc]
        mix = em_edm_fit(segs, eff.em, m, A, threads, unit_weights=unit)
        return TrainedModel(cfg, m, A, mean, mix, train_ids=list(dc.ids),
                            history=[{"em_objective": mix.objective_history}])

    lengths = {tr.id: len(tr) for tr in dc}
    r_bar = None
    history = []
    for k in range(eff.K):
        res = rmt_ticc_fit(dc, eff.seg, r_bar, threads, hook)
        segs = [s for tr in dc for s in cut_subtrajectories(tr, res.assignments[tr.id])]
        mix = em_edm_fit(segs, eff.em, m, A, threads, unit_weights=unit)
        if hook:
            hook("regulator")
        pairs, counts = build_high_level(segs, mix.hard_labels, eff.seg.Q, eff.em.O)
        hl = maxent_irl_fit(pairs, counts, eff.irl_gamma, eff.irl_steps, eff.irl_lr)
        r_bar = distribute_reward(hl, lengths, segs, mix.hard_labels)
        history.append({"iteration": k, "segments": len(segs), "ticc_rounds": res.iterations,
                        "em_objective": mix.objective_history})
        log.info(json.dumps({"event": "outer_iteration", "k": k, "segments": len(segs),
                             "em_iterations": mix.iterations}))
    return TrainedModel(cfg, m, A, mean, mix, list(res.models), res.beta, res.tau, hl,
                        list(dc.ids), history)


# ----------------------------------------------------------------------- prediction


def causal_labels(model: TrainedModel, states: np.ndarray, times: np.ndarray) -> np.ndarray:
    """High-level cluster at each step using only windows up to that step.

    Runs the forward pass of the assignment DP with r_bar = 1 and reports, at
    every t, the cluster ending the cheapest labelling of the prefix [0, t]
    (lowest id on ties). Offline Viterbi would let later windows relabel
    earlier steps.
    """
    omega = model.config.seg.omega
    X, dt = window_matrix(states, times, omega)
    nll = np.column_stack([window_nll(X, mdl) for mdl in model.seg_models])
    T, Q = nll.shape
    pen = _switch_costs(dt, np.ones(T), model.beta, model.tau, model.config.seg.reward_sign)
    off = 1.0 - np.eye(Q)
    out = np.empty(T, dtype=np.int64)
    V = nll[0].copy()
    out[0] = int(np.argmin(V))
    for t in range(1, T):
        cand = V[:, None] + pen[t] * off
        V = cand.min(axis=0) + nll[t]
        out[t] = int(np.argmin(V))
    return out


def predict_trajectory(model: TrainedModel, traj: Trajectory) -> np.ndarray:
    """(T, A) predicted action distributions; row t uses steps 0..t-1 fully and only x_t of step t."""
    if traj.states.shape[1] != model.state_dim:
        raise DataError(f"trajectory {traj.id!r}: state dimension {traj.states.shape[1]} "
                        f"!= model dimension {model.state_dim}")
    X = traj.states - model.mean
    mix = model.mixture
    O = len(mix.policies)
    if model.flat:
        q = np.zeros(len(X), dtype=np.int64)
    else:
        q = causal_labels(model, X, traj.times)
    # log pi_o(. | x_t) for every step and cluster: (T, O, A)
    F = np.stack([p.scores(X) for p in mix.policies], axis=1)
    logU = logsumexp(F, axis=2)
    logp = F - logU[:, :, None]
    probs = np.exp(logp)
    divide = model.config.em.estep_normalizer == "divide"
    log_prior = np.log(mix.priors)
    rows = np.arange(len(X))
    out = np.empty((len(X), model.num_actions))
    belief = log_prior
    for t in rows:
        if t == 0 or q[t] != q[t - 1]:
            belief = log_prior
        out[t] = np.exp(belief - logsumexp(belief)) @ probs[t]
        if O > 1:
            belief = belief + logp[t, :, traj.actions[t]]
            if divide:
                belief = belief - logU[t]
    return out


def predict_dataset(model: TrainedModel, d: DatasetManifest) -> list[dict]:
    """Prediction records (id, step, true action, distribution) in dataset order."""
    if d.state_dim != model.state_dim or d.num_actions != model.num_actions:
        raise DataError("dataset dimensions do not match the model")
    recs = []
    for tr in d:
        P = predict_trajectory(model, tr)
        for t in range(len(tr)):
            recs.append({"id": tr.id, "step": t, "action": int(tr.actions[t]), "probs": P[t].tolist()})
    return recs


# ----------------------------------------------------------------------- baseline grid

GRID = [
    ("BC_E", dict(data_axis="expert_only", weight_axis="uniform", hierarchy_axis="flat", bc=True)),
    ("EDM_E", dict(data_axis="expert_only", weight_axis="uniform", hierarchy_axis="flat")),
    ("THEMES_E", dict(data_axis="expert_only", weight_axis="uniform", hierarchy_axis="hierarchical")),
    ("EDM_W_E", dict(data_axis="expert_only", weight_axis="ranked", hierarchy_axis="flat")),
    ("HALIDE_0", dict(data_axis="expert_only", weight_axis="ranked", hierarchy_axis="hierarchical")),
    ("EDM_EI", dict(data_axis="expert_plus_imperfect", weight_axis="uniform", hierarchy_axis="flat")),
    ("HALIDE_1", dict(data_axis="expert_plus_imperfect", weight_axis="uniform", hierarchy_axis="hierarchical")),
    ("EDM_W_EI", dict(data_axis="expert_plus_imperfect", weight_axis="ranked", hierarchy_axis="flat")),
    ("HALIDE", dict(data_axis="expert_plus_imperfect", weight_axis="ranked", hierarchy_axis="hierarchical")),
]
METHODS = [name for name, _ in GRID]


def grid_configs(base: RunConfig) -> dict[str, RunConfig]:
    """The nine named configurations; behavioural cloning is flat EDM with lambda_edm = 0."""
    out = {}
    for name, axes in GRID:
        axes = dict(axes)
        em = replace(base.em, lambda_edm=0.0) if axes.pop("bc", False) else base.em
        out[name] = replace(base, em=em, **axes)
    return out


def baseline_grid(d: DatasetManifest, ranking: Sequence[RankingRecord] | None, base: RunConfig,
                  threads: int = 1, methods: Sequence[str] | None = None) -> dict[str, TrainedModel]:
    if ranking is None:
        ranking = rank_dataset(d, base.alpha, base.groups)
    cfgs = grid_configs(base)
    names = METHODS if methods is None else [m for m in METHODS if m in methods]
    return {name: halide_fit(d, ranking, cfgs[name], threads) for name in names}
