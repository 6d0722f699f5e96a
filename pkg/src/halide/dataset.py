"""Trajectory data model, JSON-lines I/O and window construction.

File layout: the first line is ``{"type": "meta", "state_dim": m, "num_actions": A}``;
every following non-blank line is one trajectory::

    {"id": "s01", "cohort": "S21", "pretest": 0.4, "posttest": 0.7,
     "steps": [{"t": 0.0, "x": [...], "a": 1, "w": 1.0}, ...]}

``pretest``, ``posttest`` and the per-step ``w`` are optional (``w`` defaults to 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import DataError


@dataclass(frozen=True)
class Step:
    t: float
    x: np.ndarray
    a: int
    w: float = 1.0


@dataclass
class Trajectory:
    """One demonstrator's ordered decisions, stored column-wise.

    ``times`` (T,), ``states`` (T, m), ``actions`` (T,) and ``weights`` (T,)
    are parallel arrays; use :attr:`steps` for a row view.
    """

    id: str
    cohort: str
    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    weights: np.ndarray
    pretest: float | None = None
    posttest: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.weights is None:
            self.weights = np.ones(len(self.times))
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def steps(self) -> list[Step]:
        return [Step(float(t), x, int(a), float(w))
                for t, x, a, w in zip(self.times, self.states, self.actions, self.weights)]

    def with_weights(self, weights) -> "Trajectory":
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), self.times.shape).copy()
        return replace(self, weights=w)


@dataclass
class DatasetManifest:
    state_dim: int
    num_actions: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        if self.state_dim < 1:
            raise DataError("state_dim must be >= 1")
        if self.num_actions < 2:
            raise DataError("num_actions must be >= 2")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    @property
    def ids(self) -> list[str]:
        return [tr.id for tr in self.trajectories]

    def by_id(self) -> dict[str, Trajectory]:
        return {tr.id: tr for tr in self.trajectories}

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(self.state_dim, self.num_actions,
                               [tr for tr in self.trajectories if tr.id in keep])

    def validate(self) -> "DatasetManifest":
        seen = set()
        for tr in self.trajectories:
            if tr.id in seen:
                raise DataError(f"duplicate trajectory id {tr.id!r}")
            seen.add(tr.id)
            validate_trajectory(tr, self.state_dim, self.num_actions)
        return self


@dataclass(frozen=True)
class Window:
    owner: str
    t_index: int
    values: np.ndarray
    dt: float


def validate_trajectory(tr: Trajectory, m: int, A: int) -> None:
    where = f"trajectory {tr.id!r}"
    T = len(tr.times)
    if T < 1:
        raise DataError(f"{where}: trajectory must have >=1 step")
    if tr.states.shape != (T, m):
        bad = next((i for i in range(T) if i >= len(tr.states) or len(tr.states[i]) != m), 0)
        raise DataError(f"{where}, step {bad}: state vector must have length {m}")
    for name, arr in (("t", tr.times), ("w", tr.weights)):
        if arr.shape != (T,):
            raise DataError(f"{where}: field {name!r} has wrong length")
    for i in range(T):
        if not np.all(np.isfinite(tr.states[i])):
            raise DataError(f"{where}, step {i}: state contains non-finite values")
        if not (0 <= tr.actions[i] < A):
            raise DataError(f"{where}, step {i}: action {tr.actions[i]} outside [0, {A - 1}]")
        if not (0.0 < tr.weights[i] <= 1.0):
            raise DataError(f"{where}, step {i}: weight {tr.weights[i]} outside (0, 1]")
        if not math.isfinite(tr.times[i]) or tr.times[i] < 0:
            raise DataError(f"{where}, step {i}: time must be finite and non-negative")
        if i and tr.times[i] <= tr.times[i - 1]:
            raise DataError(f"{where}, step {i}: time is not strictly increasing")
    for name in ("pretest", "posttest"):
        v = getattr(tr, name)
        if v is not None and not (0.0 <= v <= 1.0):
            raise DataError(f"{where}: {name} {v} outside [0, 1]")


def _parse_trajectory(rec: dict, m: int, A: int, lineno: int) -> Trajectory:
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    if "id" not in rec or "steps" not in rec:
        raise DataError(f"line {lineno}: trajectory record needs 'id' and 'steps'")
    tid = str(rec["id"])
    steps = rec["steps"]
    if not isinstance(steps, list) or not steps:
        raise DataError(f"line {lineno}: trajectory {tid!r}: trajectory must have >=1 step")
    times, states, actions, weights = [], [], [], []
    for i, s in enumerate(steps):
        try:
            t = float(s["t"])
            x = [float(v) for v in s["x"]]
            a = s["a"]
            w = float(s.get("w", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: trajectory {tid!r}, step {i}: bad step record ({exc})") from None
        if isinstance(a, bool) or not isinstance(a, int):
            raise DataError(f"line {lineno}: trajectory {tid!r}, step {i}: action must be an integer")
        if len(x) != m:
            raise DataError(f"line {lineno}: trajectory {tid!r}, step {i}: state vector must have length {m}")
        times.append(t)
        states.append(x)
        actions.append(a)
        weights.append(w)
    tr = Trajectory(
        id=tid,
        cohort=str(rec.get("cohort", "")),
        times=np.array(times),
        states=np.array(states, dtype=np.float64).reshape(len(steps), m),
        actions=np.array(actions),
        weights=np.array(weights),
        pretest=None if rec.get("pretest") is None else float(rec["pretest"]),
        posttest=None if rec.get("posttest") is None else float(rec["posttest"]),
    )
    try:
        validate_trajectory(tr, m, A)
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    return tr


def load_dataset(path) -> DatasetManifest:
    """Read and validate a trajectory file; errors carry the offending line number."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    meta = None
    trajs: list[Trajectory] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if meta is None:
                if not isinstance(rec, dict) or rec.get("type") != "meta":
                    raise DataError(f"line {lineno}: first record must be the meta record")
                try:
                    meta = (int(rec["state_dim"]), int(rec["num_actions"]))
                except (KeyError, TypeError, ValueError):
                    raise DataError(f"line {lineno}: meta record needs integer state_dim and num_actions") from None
                if meta[0] < 1 or meta[1] < 2:
                    raise DataError(f"line {lineno}: need state_dim >= 1 and num_actions >= 2")
                continue
            tr = _parse_trajectory(rec, meta[0], meta[1], lineno)
            if tr.id in seen:
                raise DataError(f"line {lineno}: duplicate trajectory id {tr.id!r} (first on line {seen[tr.id]})")
            seen[tr.id] = lineno
            trajs.append(tr)
    if meta is None:
        raise DataError(f"{path}: missing meta record")
    return DatasetManifest(meta[0], meta[1], trajs)


def trajectory_record(tr: Trajectory) -> dict:
    rec: dict = {"id": tr.id, "cohort": tr.cohort}
    if tr.pretest is not None:
        rec["pretest"] = float(tr.pretest)
    if tr.posttest is not None:
        rec["posttest"] = float(tr.posttest)
    rec["steps"] = [
        {"t": float(t), "x": [float(v) for v in x], "a": int(a), "w": float(w)}
        for t, x, a, w in zip(tr.times, tr.states, tr.actions, tr.weights)
    ]
    return rec


def dumps_dataset(d: DatasetManifest) -> str:
    lines = [json.dumps({"type": "meta", "state_dim": d.state_dim, "num_actions": d.num_actions})]
    lines += [json.dumps(trajectory_record(tr), separators=(",", ":")) for tr in d.trajectories]
    return "\n".join(lines) + "\n"


def write_dataset(d: DatasetManifest, path) -> None:
    """Write in canonical form (shortest round-trip float repr, fixed key order)."""
    Path(path).write_text(dumps_dataset(d), encoding="utf-8")


def center_states(d: DatasetManifest) -> tuple[DatasetManifest, np.ndarray]:
    """Subtract the pooled per-dimension mean over every step of every trajectory."""
    if not d.trajectories:
        return d, np.zeros(d.state_dim)
    mean = np.concatenate([tr.states for tr in d.trajectories]).mean(axis=0)
    return apply_centering(d, mean), mean


def apply_centering(d: DatasetManifest, mean: np.ndarray) -> DatasetManifest:
    trajs = [replace(tr, states=tr.states - mean) for tr in d.trajectories]
    return DatasetManifest(d.state_dim, d.num_actions, trajs)


def window_matrix(states: np.ndarray, times: np.ndarray, omega: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows (T, m*omega) ordered oldest state first, and time gaps (T,).

    Steps before ``omega - 1`` are left-padded by repeating the first state.
    The first gap is 0 because there is no predecessor.
    """
    if omega < 1:
        raise ValueError("omega must be >= 1")
    states = np.atleast_2d(states)
    T = len(states)
    padded = np.concatenate([np.repeat(states[:1], omega - 1, axis=0), states])
    X = np.concatenate([padded[k:k + T] for k in range(omega)], axis=1)
    dt = np.zeros(T)
    dt[1:] = np.diff(times)
    return X, dt


def windowize(traj: Trajectory, omega: int) -> list[Window]:
    X, dt = window_matrix(traj.states, traj.times, omega)
    return [Window(traj.id, i, X[i], float(dt[i])) for i in range(len(X))]
