"""Seeded RNG streams and an order-preserving worker pool.

Every stochastic step derives its generator from ``(seed, *keys)`` so results
never depend on how work is scheduled across threads.
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def derive_seed(seed, *keys):
    h = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("RANKBENCH_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def parallel_map(fn, items, threads=None):
    """``list(map(fn, items))`` on a thread pool; output order follows input."""
    items = list(items)
    n = min(resolve_threads(threads), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
