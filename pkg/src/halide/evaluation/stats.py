"""Friedman rank test with Conover pairwise comparisons and Holm step-down correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2, rankdata, t as t_dist

from .. import DataError


@dataclass
class FriedmanResult:
    methods: list[str]
    mean_ranks: np.ndarray
    statistic: float
    p_value: float
    pairwise_p: np.ndarray  # Holm-adjusted; 1 where not tested
    reject: np.ndarray  # bool, symmetric
    groups: dict[str, str] = field(default_factory=dict)
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return bool(self.reject.any())

    def cd_rows(self) -> list[tuple[str, float, str]]:
        """(method, mean rank, group letters) ordered by mean rank, then by input order."""
        order = np.argsort(self.mean_ranks, kind="stable")
        return [(self.methods[i], float(self.mean_ranks[i]), self.groups[self.methods[i]]) for i in order]


def within_block_ranks(table: np.ndarray) -> np.ndarray:
    """Rank methods (rows) inside every fold (column); 1 = highest value, ties share the midrank."""
    return np.column_stack([rankdata(-table[:, j]) for j in range(table.shape[1])])


def holm_adjust(p: Sequence[float]) -> np.ndarray:
    """Holm step-down adjusted p-values, in the input order."""
    p = np.asarray(p, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, min(1.0, (m - i) * p[idx]))
        adj[idx] = running
    return adj


def friedman_conover(table, methods: Sequence[str] | None = None, alpha: float = 0.05) -> FriedmanResult:
    """Friedman test over a methods x folds table of scores (higher is better).

    The chi-square statistic is tie-corrected,
    T1 = (k-1) sum_j (R_j - n(k+1)/2)^2 / (A1 - n k (k+1)^2 / 4),
    with R_j the rank sum of method j over n folds and A1 the sum of squared
    ranks. Only when its p-value is below ``alpha`` are pairs compared with
    Conover's statistic
    |R_i - R_j| / sqrt(2 (n A1 - sum_j R_j^2) / ((n-1)(k-1)))
    on a t distribution with (n-1)(k-1) degrees of freedom, Holm-adjusted
    across all pairs.
    """
    X = np.asarray(table, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise DataError("need at least 2 methods and 2 folds")
    if not np.all(np.isfinite(X)):
        raise DataError("score table has non-finite entries")
    k, n = X.shape
    methods = list(methods) if methods is not None else [f"m{i}" for i in range(k)]
    if len(methods) != k:
        raise DataError("one name per method row is required")

    ranks = within_block_ranks(X)
    R = ranks.sum(axis=1)
    mean_ranks = R / n
    A1 = float(np.sum(ranks ** 2))
    C1 = n * k * (k + 1) ** 2 / 4.0
    no_test = np.ones((k, k))
    no_reject = np.zeros((k, k), dtype=bool)

    if A1 - C1 <= 1e-12 * C1:
        # every fold ties every method
        return FriedmanResult(methods, mean_ranks, 0.0, 1.0, no_test, no_reject,
                              letter_groups(mean_ranks, no_reject, methods), True)

    T1 = (k - 1) * float(np.sum((R - n * (k + 1) / 2.0) ** 2)) / (A1 - C1)
    p = float(chi2.sf(T1, k - 1))
    if not p < alpha:
        return FriedmanResult(methods, mean_ranks, T1, p, no_test, no_reject,
                              letter_groups(mean_ranks, no_reject, methods))

    df = (n - 1) * (k - 1)
    denom2 = 2.0 * (n * A1 - float(np.sum(R ** 2))) / df
    iu = np.triu_indices(k, 1)
    diff = np.abs(R[iu[0]] - R[iu[1]])
    if denom2 <= 0:
        # identical rankings in every fold: any rank-sum gap is decisive
        raw = np.where(diff > 0, 0.0, 1.0)
    else:
        raw = 2.0 * t_dist.sf(diff / np.sqrt(denom2), df)
    adj = holm_adjust(raw)
    P = np.ones((k, k))
    P[iu] = adj
    P.T[iu] = adj
    rej = P < alpha
    np.fill_diagonal(rej, False)
    return FriedmanResult(methods, mean_ranks, T1, p, P, rej, letter_groups(mean_ranks, rej, methods))


def letter_groups(mean_ranks: np.ndarray, reject: np.ndarray, methods: Sequence[str]) -> dict[str, str]:
    """Letters marking runs of rank-adjacent methods with no significant pair among them.

    Methods sharing a letter are statistically indistinguishable, as joined by a
    bar in a critical-difference diagram.
    """
    order = list(np.argsort(mean_ranks, kind="stable"))
    k = len(order)
    spans = []
    for i in range(k):
        j = i
        while j + 1 < k and not any(reject[order[a], order[j + 1]] for a in range(i, j + 1)):
            j += 1
        if not spans or j > spans[-1][1]:
            spans.append((i, j))
    letters = {m: "" for m in methods}
    for g, (i, j) in enumerate(spans):
        tag = chr(ord("a") + g) if g < 26 else f"g{g}"
        for pos in range(i, j + 1):
            letters[methods[order[pos]]] += tag
    return letters
