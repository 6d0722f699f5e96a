"""Small shared helpers: seeded sub-streams, hashing, worker pools, json floats."""

from __future__ import annotations

import hashlib
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a path of names.

    All randomness in the package flows through here so that no component
    touches a global RNG and the stream a component sees does not depend on
    the order in which other components drew numbers.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            key.append(int(name) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(key))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def ordered_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T], threads: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally on a thread pool.

    Results always come back in input order, so any reduction done by the
    caller is independent of the worker count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def to_list(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()
