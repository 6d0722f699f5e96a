"""High-level reward over (state cluster, policy cluster) pairs.

Each trajectory is summarised as a sequence of high-level pairs (q_i, o_i),
one per sub-trajectory. A tabular maximum-entropy IRL fit on that sequence
yields a Q x O reward, which is min-max scaled and spread back onto the steps
as the per-step signal that regulates the next segmentation round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import DataError

log = logging.getLogger(__name__)

VI_TOL = 1e-8
GRAD_TOL = 1e-6
DEGENERATE_SPREAD = 1e-12


@dataclass
class HighLevelModel:
    reward: np.ndarray  # (Q, O)
    transitions: np.ndarray  # (Q, O, Q), rows sum to 1
    gamma: float
    normalized_reward: np.ndarray  # (Q, O) in [0, 1]
    iterations: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.reward.shape

    def to_json(self) -> dict:
        return {"reward": self.reward.tolist(), "transitions": self.transitions.tolist(),
                "gamma": self.gamma, "normalized_reward": self.normalized_reward.tolist(),
                "iterations": self.iterations}

    @classmethod
    def from_json(cls, d: Mapping) -> "HighLevelModel":
        return cls(np.array(d["reward"], dtype=np.float64), np.array(d["transitions"], dtype=np.float64),
                   float(d["gamma"]), np.array(d["normalized_reward"], dtype=np.float64),
                   int(d.get("iterations", 0)))

    @classmethod
    def constant(cls, Q: int, O: int, value: float = 1.0, gamma: float = 0.95) -> "HighLevelModel":
        """Table that spreads ``value`` everywhere (the state before any fit)."""
        P = np.zeros((Q, O, Q))
        P[np.arange(Q), :, np.arange(Q)] = 1.0
        R = np.full((Q, O), float(value))
        return cls(R, P, gamma, R.copy())


def build_high_level(segments: Sequence, labels: Sequence[int], Q: int, O: int
                     ) -> tuple[list[list[tuple[int, int]]], np.ndarray]:
    """Per-trajectory (q, o) sequences and counts of (q_i, o_i) -> q_{i+1}.

    ``segments`` are sub-trajectories in dataset order (grouped by owner, in
    time order within an owner); ``labels`` holds the policy cluster of each.
    """
    if len(segments) != len(labels):
        raise DataError(f"{len(segments)} sub-trajectories but {len(labels)} labels")
    pairs: list[list[tuple[int, int]]] = []
    counts = np.zeros((Q, O, Q))
    owner = None
    for seg, o in zip(segments, labels):
        q, o = int(seg.high_state), int(o)
        if not (0 <= q < Q and 0 <= o < O):
            raise DataError(f"pair ({q}, {o}) outside a {Q}x{O} table")
        if seg.owner != owner:
            pairs.append([])
            owner = seg.owner
        elif pairs[-1]:
            pq, po = pairs[-1][-1]
            counts[pq, po, q] += 1
        pairs[-1].append((q, o))
    return pairs, counts


def transition_probs(counts: np.ndarray) -> np.ndarray:
    """Row-normalise counts; rows never observed stay on the same q."""
    Q, O, _ = counts.shape
    tot = counts.sum(axis=2, keepdims=True)
    P = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    empty = tot[..., 0] == 0
    qi, oi = np.nonzero(empty)
    P[qi, oi, qi] = 1.0
    return P


def _lse_rows(M: np.ndarray) -> np.ndarray:
    # tables are tiny; scipy's general logsumexp costs more than the arithmetic
    mx = M.max(axis=1)
    return mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))


def soft_value_iteration(R: np.ndarray, P: np.ndarray, gamma: float, tol: float = VI_TOL,
                         max_iter: int = 100000, V0: np.ndarray | None = None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Soft-optimal (V, policy) with Q(q,o) = R + gamma * E[V(q')] and V = logsumexp_o Q.

    Iterates until successive values differ by less than ``tol`` in max-norm;
    ``V0`` warm-starts the iteration.
    """
    V = np.zeros(R.shape[0]) if V0 is None else np.array(V0, dtype=np.float64)
    for _ in range(max_iter):
        V_new = _lse_rows(R + gamma * P @ V)
        done = np.max(np.abs(V_new - V)) < tol
        V = V_new
        if done:
            break
    Qv = R + gamma * P @ V
    return V, np.exp(Qv - _lse_rows(Qv)[:, None])


def empirical_visitation(pairs: Sequence[Sequence[tuple[int, int]]], Q: int, O: int,
                         gamma: float) -> np.ndarray:
    """Discounted (q, o) counts per trajectory, averaged over trajectories."""
    mu = np.zeros((Q, O))
    for seq in pairs:
        for i, (q, o) in enumerate(seq):
            mu[q, o] += gamma ** i
    return mu / len(pairs)


def start_distribution(pairs: Sequence[Sequence[tuple[int, int]]], Q: int) -> np.ndarray:
    p0 = np.zeros(Q)
    for seq in pairs:
        p0[seq[0][0]] += 1.0
    return p0 / len(pairs)


def expected_visitation(policy: np.ndarray, P: np.ndarray, p0: np.ndarray, gamma: float,
                        lengths: Sequence[int]) -> np.ndarray:
    """Discounted (q, o) visitation of the soft policy over the observed horizons.

    A trajectory with L segments contributes steps 0..L-1, so step i is weighted
    by the fraction of trajectories longer than i.
    """
    lengths = np.asarray(lengths)
    mu = np.zeros_like(policy)
    d = p0.copy()
    for i in range(int(lengths.max())):
        sa = d[:, None] * policy
        mu += (gamma ** i) * np.mean(lengths > i) * sa
        d = np.einsum("qo,qor->r", sa, P)
    return mu


def minmax_normalize(R: np.ndarray) -> np.ndarray:
    lo, hi = float(R.min()), float(R.max())
    if hi - lo <= DEGENERATE_SPREAD * max(1.0, abs(lo), abs(hi)):
        return np.full_like(R, 0.5, dtype=np.float64)
    return (R - lo) / (hi - lo)


def maxent_irl_fit(pairs: Sequence[Sequence[tuple[int, int]]], counts: np.ndarray,
                   gamma: float = 0.95, steps: int = 200, lr: float = 0.1) -> HighLevelModel:
    """Tabular maximum-entropy IRL with one-hot (q, o) features.

    Gradient ascent on the reward with gradient = empirical minus expected
    discounted visitation, starting from the empirical first-segment
    distribution. Stops after ``steps`` updates or once the gradient's max-norm
    drops below 1e-6.
    """
    pairs = [list(p) for p in pairs if len(p)]
    if not pairs:
        raise DataError("no high-level pairs to fit a reward on")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    Q, O, _ = counts.shape
    P = transition_probs(counts)
    p0 = start_distribution(pairs, Q)
    lengths = [len(p) for p in pairs]
    mu_emp = empirical_visitation(pairs, Q, O, gamma)
    R = np.zeros((Q, O))
    updates = 0
    V = None
    for _ in range(steps):
        V, pol = soft_value_iteration(R, P, gamma, V0=V)
        g = mu_emp - expected_visitation(pol, P, p0, gamma, lengths)
        if np.max(np.abs(g)) < GRAD_TOL:
            break
        R = R + lr * g
        updates += 1
    log.debug("MaxEnt IRL stopped after %d updates", updates)
    return HighLevelModel(R, P, float(gamma), minmax_normalize(R), updates)


def irl_gradient(R: np.ndarray, pairs, counts: np.ndarray, gamma: float) -> np.ndarray:
    """Gradient of the MaxEnt log-likelihood at reward table ``R``."""
    Q, O, _ = counts.shape
    P = transition_probs(counts)
    _, pol = soft_value_iteration(R, P, gamma)
    return (empirical_visitation(pairs, Q, O, gamma)
            - expected_visitation(pol, P, start_distribution(pairs, Q), gamma, [len(p) for p in pairs]))


def distribute_reward(model: HighLevelModel, lengths: Mapping[str, int], segments: Sequence,
                      labels: Sequence[int]) -> dict[str, np.ndarray]:
    """Per-step r_bar: the normalised reward of each step's (q, o) pair.

    ``lengths`` maps every trajectory id to its number of steps; every step must
    be covered by exactly one labelled sub-trajectory.
    """
    if len(segments) != len(labels):
        raise DataError(f"{len(segments)} sub-trajectories but {len(labels)} labels")
    out = {tid: np.full(int(T), np.nan) for tid, T in lengths.items()}
    table = model.normalized_reward
    for seg, o in zip(segments, labels):
        if seg.owner not in out:
            raise DataError(f"sub-trajectory owner {seg.owner!r} is not in the dataset")
        out[seg.owner][seg.start:seg.end] = table[int(seg.high_state), int(o)]
    for tid, r in out.items():
        if np.isnan(r).any():
            raise DataError(f"trajectory {tid!r}: step {int(np.flatnonzero(np.isnan(r))[0])} has no label")
    return out
