"""Ordered parallel map over independent trajectories.

Worker count comes from ``NLWAVE_THREADS`` (default: all cores).  Results are
returned in input order, so reductions over them are deterministic.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count() -> int:
    env = os.environ.get("NLWAVE_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("NLWAVE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def ordered_map(fn, items, workers: int | None = None) -> list:
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
