"""Cohort ordering and expanding-window temporal folds."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass

from .. import DataError
from ..dataset import DatasetManifest

# spring, summer, fall within one academic calendar year
_SEASONS = {"S": 0, "SP": 0, "SU": 1, "U": 1, "F": 2, "FA": 2}
_COHORT_RE = re.compile(r"^\s*([A-Za-z]+)[\s_-]*(\d{2}|\d{4})\s*$")


class CohortOrderWarning(UserWarning):
    pass


def cohort_key(label: str) -> tuple[int, int] | None:
    """(year, season) for labels such as ``S21``, ``F2024`` or ``Su-22``; None if unparsable."""
    m = _COHORT_RE.match(label)
    if not m or m.group(1).upper() not in _SEASONS:
        return None
    year = int(m.group(2))
    if year < 100:
        year += 2000
    return year, _SEASONS[m.group(1).upper()]


def order_cohorts(labels) -> list[str]:
    """Distinct cohort labels in temporal order.

    Falls back to plain string order, with a warning, unless every label parses.
    """
    uniq = sorted(set(labels))
    keys = {lab: cohort_key(lab) for lab in uniq}
    if all(k is not None for k in keys.values()):
        return sorted(uniq, key=lambda lab: (keys[lab], lab))
    bad = [lab for lab, k in keys.items() if k is None]
    warnings.warn(f"cannot parse cohort labels {bad[:3]}; ordering cohorts lexicographically",
                  CohortOrderWarning, stacklevel=2)
    return uniq


@dataclass(frozen=True)
class Fold:
    index: int
    train_cohorts: tuple[str, ...]
    test_cohort: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def temporal_folds(d: DatasetManifest) -> list[Fold]:
    """Train on cohorts c_1..c_j and test on c_{j+1}, for j = 1..M-1."""
    order = order_cohorts(tr.cohort for tr in d)
    if len(order) < 2:
        raise DataError(f"temporal folds need at least 2 cohorts, found {len(order)}")
    folds = []
    for j in range(1, len(order)):
        train = set(order[:j])
        folds.append(Fold(j - 1, tuple(order[:j]), order[j],
                          tuple(tr.id for tr in d if tr.cohort in train),
                          tuple(tr.id for tr in d if tr.cohort == order[j])))
    return folds
