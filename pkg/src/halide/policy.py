"""Energy-based policies and quality-weighted EM over sub-trajectories.

A policy is a score function f(x, a); pi(a|x) is its softmax over actions and
U(x) = sum_a exp f(x, a) its normalizer. The per-cluster M-step objective for
sub-trajectory i is

    u_io * sum_t w_it * (-log pi(a_it | x_it) + lambda_edm * log U(x_it))

while responsibilities ignore the decision weights and use the segment
likelihood prod_t pi(a|x), optionally divided by prod_t U(x)
(``estep_normalizer="divide"``). Dividing by U lets the cluster with the
flattest score surface absorb most segments on mixed-quality data, so it is
off by default.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.cluster import KMeans

from . import DataError, NumericalError
from ._util import substream

log = logging.getLogger(__name__)

PRIOR_FLOOR = 1e-8


@dataclass
class EMConfig:
    O: int = 3
    lambda_edm: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    m_steps: int = 100
    max_em_iter: int = 30
    em_tol: float = 1e-4
    arch: str = "linear"
    hidden: int = 32
    # "none": segment likelihood prod_t pi(a|x); "divide": prod_t pi(a|x) / U(x)
    estep_normalizer: str = "none"
    init_features: str = "moments"  # "moments" | "mean_state"
    init_restarts: int = 10  # k-means restarts inside one initialisation
    em_restarts: int = 3  # independent EM runs; the best marginal likelihood wins
    seed: int = 0

    def __post_init__(self):
        if self.O < 1:
            raise ValueError("O must be >= 1")
        if self.em_restarts < 1 or self.init_restarts < 1:
            raise ValueError("restart counts must be >= 1")
        if self.lambda_edm < 0:
            raise ValueError("lambda_edm must be >= 0")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if self.arch not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.estep_normalizer not in ("none", "divide"):
            raise ValueError(f"unknown estep_normalizer {self.estep_normalizer!r}")
        if self.init_features not in ("moments", "mean_state"):
            raise ValueError(f"unknown init_features {self.init_features!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "EMConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EM config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


class EnergyPolicy:
    """Score function over (state, action) with a flat parameter vector.

    ``linear``: f(x, a) = W[a] . x + b[a].
    ``mlp``:    f(x, a) = V[a] . tanh(W1 x + c1) + b[a].
    """

    def __init__(self, state_dim: int, num_actions: int, arch: str = "linear", hidden: int = 32,
                 params: np.ndarray | None = None):
        self.m, self.A, self.arch, self.hidden = int(state_dim), int(num_actions), arch, int(hidden)
        if arch not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {arch!r}")
        self.params = np.zeros(self.n_params) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.arch == "linear":
            return [("W", (self.A, self.m)), ("b", (self.A,))]
        H = self.hidden
        return [("W1", (H, self.m)), ("c1", (H,)), ("V", (self.A, H)), ("b", (self.A,))]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def unpack(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            out[name] = flat[i:i + n].reshape(shape)
            i += n
        return out

    def copy(self) -> "EnergyPolicy":
        return EnergyPolicy(self.m, self.A, self.arch, self.hidden, self.params.copy())

    @classmethod
    def random_init(cls, state_dim, num_actions, arch, hidden, rng: np.random.Generator) -> "EnergyPolicy":
        pol = cls(state_dim, num_actions, arch, hidden)
        if arch == "mlp":
            p = pol.unpack()
            p["W1"][...] = rng.normal(scale=1.0 / np.sqrt(state_dim), size=p["W1"].shape)
        return pol

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.m:
            raise DataError(f"state dimension {X.shape[1]} != policy dimension {self.m}")
        return self._scores(X)

    def _scores(self, X: np.ndarray) -> np.ndarray:
        p = self.unpack()
        if self.arch == "linear":
            return X @ p["W"].T + p["b"]
        return np.tanh(X @ p["W1"].T + p["c1"]) @ p["V"].T + p["b"]

    def backprop(self, X: np.ndarray, dF: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum(dF * scores(X))."""
        p = self.unpack()
        if self.arch == "linear":
            return np.concatenate([(dF.T @ X).ravel(), dF.sum(0)])
        h = np.tanh(X @ p["W1"].T + p["c1"])
        dz = (dF @ p["V"]) * (1.0 - h * h)
        return np.concatenate([(dz.T @ X).ravel(), dz.sum(0), (dF.T @ h).ravel(), dF.sum(0)])

    def project_common_mode(self, g: np.ndarray) -> np.ndarray:
        """Drop the component that shifts every action's score equally.

        That direction leaves pi unchanged but drives log U without bound when
        lambda_edm > 0, so optimisation is restricted to its complement.
        """
        g = g.copy()
        parts = self.unpack(g)
        for name in ("W", "b") if self.arch == "linear" else ("V", "b"):
            parts[name] -= parts[name].mean(axis=0, keepdims=True)
        return g

    def to_json(self) -> dict:
        return {"arch": self.arch, "state_dim": self.m, "num_actions": self.A,
                "hidden": self.hidden, "params": self.params.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "EnergyPolicy":
        return cls(d["state_dim"], d["num_actions"], d["arch"], d.get("hidden", 32), d["params"])


def policy_log_prob(pol: EnergyPolicy, x, a):
    """log pi(a | x); vectorised over rows of ``x`` when ``a`` is an array."""
    F = pol.scores(x)
    lp = F - logsumexp(F, axis=1, keepdims=True)
    out = lp[np.arange(len(F)), np.broadcast_to(np.asarray(a), (len(F),))]
    return float(out[0]) if np.ndim(x) == 1 else out


def log_normalizer(pol: EnergyPolicy, x):
    out = logsumexp(pol.scores(x), axis=1)
    return float(out[0]) if np.ndim(x) == 1 else out


def action_probs(pol: EnergyPolicy, x) -> np.ndarray:
    return softmax(pol.scores(x), axis=1)


def _loss_terms(pol: EnergyPolicy, X, a, c, lambda_edm):
    F = pol.scores(X)
    lse = logsumexp(F, axis=1)
    per_step = -(F[np.arange(len(F)), a] - lse) + lambda_edm * lse
    return F, lse, per_step


def weighted_loss(pol: EnergyPolicy, X, a, w, u: float = 1.0, lambda_edm: float = 0.0) -> float:
    """``u * sum_t w_t * (-log pi(a_t|x_t) + lambda_edm * log U(x_t))``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    _, _, per_step = _loss_terms(pol, X, a, w, lambda_edm)
    return float(u * np.dot(w, per_step))


def loss_gradient(pol: EnergyPolicy, X, a, w, u: float = 1.0, lambda_edm: float = 0.0) -> np.ndarray:
    """Exact gradient of :func:`weighted_loss` with respect to ``pol.params``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    c = u * np.asarray(w, dtype=np.float64).reshape(-1)
    if X.shape[1] != pol.m:
        raise DataError(f"state dimension {X.shape[1]} != policy dimension {pol.m}")
    return _gradient(pol, X, np.eye(pol.A)[a], c, lambda_edm)


def _gradient(pol: EnergyPolicy, X, onehot, c, lambda_edm) -> np.ndarray:
    # d/dF of c * (-F[a] + (1 + lambda) * lse(F)) is c * ((1 + lambda) * pi - onehot(a))
    F = pol._scores(X)
    P = np.exp(F - F.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    return pol.backprop(X, ((1.0 + lambda_edm) * P - onehot) * c[:, None])


# --------------------------------------------------------------------------- EM


@dataclass
class SubtrajData:
    """Steps of all sub-trajectories concatenated, with the owning segment per step."""

    X: np.ndarray
    a: np.ndarray
    w: np.ndarray
    seg: np.ndarray
    n_segments: int
    mean_states: np.ndarray

    @classmethod
    def from_segments(cls, segments: Sequence, unit_weights: bool = False) -> "SubtrajData":
        if not segments:
            raise DataError("no sub-trajectories")
        X = np.concatenate([s.states for s in segments])
        a = np.concatenate([s.actions for s in segments]).astype(np.int64)
        w = np.ones(len(X)) if unit_weights else np.concatenate([s.weights for s in segments])
        seg = np.repeat(np.arange(len(segments)), [len(s.states) for s in segments])
        means = np.stack([s.states.mean(axis=0) for s in segments])
        return cls(X, a, w.astype(np.float64), seg, len(segments), means)


@dataclass
class MixtureState:
    policies: list[EnergyPolicy]
    priors: np.ndarray
    responsibilities: np.ndarray
    hard_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    restart_histories: list[list[float]] = field(default_factory=list)  # every restart, kept or not

    def to_json(self) -> dict:
        return {"policies": [p.to_json() for p in self.policies], "priors": self.priors.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "MixtureState":
        pols = [EnergyPolicy.from_json(p) for p in d["policies"]]
        return cls(pols, np.array(d["priors"], dtype=np.float64), np.zeros((0, len(pols))))


def segment_loglik(policies: Sequence[EnergyPolicy], data: SubtrajData,
                   normalizer: str = "none") -> np.ndarray:
    """(N_hat, O) matrix of per-segment log-likelihoods; decision weights are ignored.

    ``normalizer="none"`` sums log pi_o(a|x); ``"divide"`` additionally
    subtracts log U_o(x) at every step.
    """
    out = np.zeros((data.n_segments, len(policies)))
    for o, pol in enumerate(policies):
        F = pol.scores(data.X)
        lse = logsumexp(F, axis=1)
        per_step = F[np.arange(len(F)), data.a] - lse
        if normalizer == "divide":
            per_step = per_step - lse
        out[:, o] = np.bincount(data.seg, weights=per_step, minlength=data.n_segments)
    return out


def responsibilities(loglik: np.ndarray, priors: np.ndarray) -> np.ndarray:
    logpost = np.log(priors)[None, :] + loglik
    return np.exp(logpost - logsumexp(logpost, axis=1, keepdims=True))


def e_step(data: SubtrajData, mixture: MixtureState, normalizer: str = "none") -> np.ndarray:
    return responsibilities(segment_loglik(mixture.policies, data, normalizer), mixture.priors)


def update_priors(u: np.ndarray) -> np.ndarray:
    rho = np.maximum(u.sum(axis=0) / u.shape[0], PRIOR_FLOOR)
    return rho / rho.sum()


def expected_objective(policies: Sequence[EnergyPolicy], data: SubtrajData, u: np.ndarray,
                       lambda_edm: float) -> float:
    """sum_i sum_o u_io * weighted_loss(theta_o, xi_i), divided by the total decision weight."""
    total = 0.0
    for o, pol in enumerate(policies):
        _, _, per_step = _loss_terms(pol, data.X, data.a, None, lambda_edm)
        total += float(np.dot(u[data.seg, o] * data.w, per_step))
    return total / float(data.w.sum())


def _descend(pol: EnergyPolicy, data: SubtrajData, c: np.ndarray, cfg: EMConfig) -> EnergyPolicy:
    mass = float(c.sum())
    if mass <= 0.0:
        return pol
    pol = pol.copy()
    vel = np.zeros_like(pol.params)
    onehot = np.eye(pol.A)[data.a]
    for _ in range(cfg.m_steps):
        g = pol.project_common_mode(_gradient(pol, data.X, onehot, c, cfg.lambda_edm)) / mass
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient in M-step; reduce lr")
        vel = cfg.momentum * vel - cfg.lr * g
        pol.params = pol.params + vel
    val = weighted_loss(pol, data.X, data.a, c, 1.0, cfg.lambda_edm)
    if not np.isfinite(val):
        raise NumericalError(f"non-finite M-step loss (lr={cfg.lr}); step size too large")
    return pol


def m_step(data: SubtrajData, u: np.ndarray, policies: Sequence[EnergyPolicy], cfg: EMConfig,
           threads: int = 1) -> tuple[list[EnergyPolicy], np.ndarray]:
    """Gradient steps on each cluster's responsibility- and decision-weighted loss.

    Steps are scaled by the cluster's total weight mass, which leaves every
    minimiser unchanged and makes the update invariant to rescaling w.
    """
    from ._util import ordered_map

    def fit(o):
        return _descend(policies[o], data, u[data.seg, o] * data.w, cfg)

    new = ordered_map(fit, range(len(policies)), threads)
    return new, update_priors(u)


def segment_features(data: SubtrajData, num_actions: int, kind: str = "moments") -> np.ndarray:
    """Per-segment summary used to seed EM.

    ``mean_state`` is the segment's mean state. ``moments`` appends action
    frequencies and the action-conditional state moments mean_t[x_t 1(a_t = k)],
    which are the sufficient statistics of a linear softmax policy; columns are
    z-scored.
    """
    if kind == "mean_state":
        return data.mean_states
    n = data.n_segments
    counts = np.bincount(data.seg, minlength=n).astype(np.float64)
    onehot = np.eye(num_actions)[data.a]
    cols = [data.mean_states, np.stack([np.bincount(data.seg, weights=onehot[:, k], minlength=n)
                                        for k in range(num_actions)], axis=1) / counts[:, None]]
    for k in range(num_actions):
        xk = data.X * onehot[:, k:k + 1]
        cols.append(np.stack([np.bincount(data.seg, weights=xk[:, j], minlength=n)
                              for j in range(data.X.shape[1])], axis=1) / counts[:, None])
    F = np.concatenate(cols, axis=1)
    sd = F.std(axis=0)
    return (F - F.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def _init_responsibilities(data: SubtrajData, cfg: EMConfig, num_actions: int,
                           rng: np.random.Generator) -> np.ndarray:
    if cfg.O == 1:
        return np.ones((data.n_segments, 1))
    F = segment_features(data, num_actions, cfg.init_features)
    km = KMeans(n_clusters=cfg.O, init="k-means++", n_init=cfg.init_restarts,
                random_state=int(rng.integers(2**31 - 1)))
    # longer segments carry more evidence about their policy
    lab = km.fit_predict(F, sample_weight=np.bincount(data.seg, minlength=data.n_segments))
    u = np.zeros((data.n_segments, cfg.O))
    u[np.arange(data.n_segments), lab] = 1.0
    return u


def marginal_loglik(mixture: MixtureState, data: SubtrajData, normalizer: str = "none") -> float:
    """sum_i log sum_o rho_o L_o(xi_i), the quantity used to choose among restarts."""
    ll = segment_loglik(mixture.policies, data, normalizer)
    return float(logsumexp(np.log(mixture.priors)[None, :] + ll, axis=1).sum())


def _em_run(data: SubtrajData, cfg: EMConfig, state_dim: int, num_actions: int,
            restart: int, threads: int) -> MixtureState:
    rng = substream(cfg.seed, "em", restart)
    policies = [EnergyPolicy.random_init(state_dim, num_actions, cfg.arch, cfg.hidden, rng)
                for _ in range(cfg.O)]
    # seed the policies on a hard partition, then alternate E and M steps
    u = _init_responsibilities(data, cfg, num_actions, rng)
    policies, priors = m_step(data, u, policies, cfg, threads)
    history: list[float] = []
    it = 0
    for it in range(1, cfg.max_em_iter + 1):
        u = responsibilities(segment_loglik(policies, data, cfg.estep_normalizer), priors)
        new_policies, new_priors = m_step(data, u, policies, cfg, threads)
        obj = expected_objective(new_policies, data, u, cfg.lambda_edm)
        if history and obj > history[-1]:
            # the E-step ignores w and log U, so it is not a descent step for this
            # objective; keep the last iterate that lowered it and stop
            log.debug("EM iteration %d raised the objective by %.3g; stopping", it, obj - history[-1])
            break
        policies, priors = new_policies, new_priors
        history.append(obj)
        if len(history) > 1 and history[-2] - history[-1] < cfg.em_tol:
            break
    u = responsibilities(segment_loglik(policies, data, cfg.estep_normalizer), priors)
    return MixtureState(policies, priors, u, np.argmax(u, axis=1), history, len(history))


def em_edm_fit(segments: Sequence, cfg: EMConfig, state_dim: int, num_actions: int,
               threads: int = 1, unit_weights: bool = False) -> MixtureState:
    """Quality-weighted EM-EDM over sub-trajectories (objects with states/actions/weights).

    Runs ``cfg.em_restarts`` independent initialisations and keeps the one with
    the highest marginal likelihood (earliest restart on ties). Decision weights
    enter the M-step only.
    """
    data = SubtrajData.from_segments(segments, unit_weights=unit_weights)
    if cfg.O > data.n_segments:
        raise DataError(f"O={cfg.O} exceeds the number of sub-trajectories ({data.n_segments})")
    best, best_ll = None, -np.inf
    histories = []
    for r in range(cfg.em_restarts if cfg.O > 1 else 1):
        mix = _em_run(data, cfg, state_dim, num_actions, r, threads)
        ll = marginal_loglik(mix, data, cfg.estep_normalizer)
        histories.append(list(mix.objective_history))
        log.debug("EM restart %d: %d iterations, log-likelihood %.4f", r, mix.iterations, ll)
        if ll > best_ll:
            best, best_ll = mix, ll
    best.restart_histories = histories
    return best


def mixture_predict(mixture: MixtureState, x, belief) -> np.ndarray:
    """Belief-weighted average of the cluster policies' action distributions at ``x``."""
    belief = np.asarray(belief, dtype=np.float64)
    if belief.shape != (len(mixture.policies),):
        raise DataError("belief must have one entry per policy cluster")
    probs = np.stack([action_probs(p, x) for p in mixture.policies])  # (O, n, A)
    out = np.tensordot(belief, probs, axes=1)
    return out[0] if np.ndim(x) == 1 else out
