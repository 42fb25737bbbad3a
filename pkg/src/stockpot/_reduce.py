"""Deterministic reductions and the per-unit worker pool.

Every sum that feeds a reported number goes through :func:`pairwise_sum`:
sequential accumulation inside fixed 128-element blocks, then a balanced
binary tree over the block partials. The schedule depends only on the input
length, so results are bit-identical regardless of thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

import numpy as np

BLOCK = 128

T = TypeVar("T")
R = TypeVar("R")


def pairwise_sum(x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        return 0.0
    nblocks = -(-x.size // BLOCK)
    padded = np.zeros(nblocks * BLOCK, dtype=np.float64)
    padded[: x.size] = x
    cols = padded.reshape(nblocks, BLOCK).T
    acc = cols[0].copy()
    for row in cols[1:]:
        acc += row
    while acc.size > 1:
        if acc.size % 2:
            acc = np.append(acc, 0.0)
        acc = acc[0::2] + acc[1::2]
    return float(acc[0])


def dot(a, b) -> float:
    return pairwise_sum(np.multiply(a, b, dtype=np.float64))


def norm(a) -> float:
    return math.sqrt(dot(a, a))


def cosine(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1].

    ``sqrt(aa * bb)`` rather than ``sqrt(aa) * sqrt(bb)`` makes identical
    inputs give exactly 1.0.
    """
    ab = dot(a, b)
    aa = dot(a, a)
    bb = dot(b, b)
    denom = math.sqrt(aa * bb)
    if not math.isfinite(denom) or denom == 0.0:
        denom = math.sqrt(aa) * math.sqrt(bb)
    return min(1.0, max(-1.0, ab / denom))


def thread_count() -> int:
    raw = os.environ.get("STOCKPOT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"STOCKPOT_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError("STOCKPOT_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
