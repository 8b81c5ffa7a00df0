"""Work-efficient exclusive prefix sum (up-sweep / down-sweep) with optional block parallelism."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import InvalidInputError


def _blelloch(x: np.ndarray) -> np.ndarray:
    """Exclusive scan of ``x``; every level is one data-parallel numpy step."""
    n = x.size
    if n == 0:
        return x.copy()
    size = 1 << (n - 1).bit_length()
    a = np.zeros(size, dtype=np.int64)
    a[:n] = x
    d = 1
    while d < size:  # up-sweep: a[k + 2d - 1] += a[k + d - 1]
        a[2 * d - 1::2 * d] += a[d - 1::2 * d]
        d *= 2
    a[-1] = 0
    d = size // 2
    while d >= 1:  # down-sweep
        left = a[d - 1::2 * d].copy()
        a[d - 1::2 * d] = a[2 * d - 1::2 * d]
        a[2 * d - 1::2 * d] += left
        d //= 2
    return a[:n]


def prefix_sum_exclusive(demands, workers: int = 1, pool: ThreadPoolExecutor | None = None) -> np.ndarray:
    """``offsets[k] = sum(demands[:k])``.

    With ``workers > 1`` the input is cut into blocks that are scanned
    concurrently, the block totals are scanned, and each block adds its
    carry-in. Integer arithmetic, so the result is identical for any
    ``workers``.
    """
    x = np.asarray(demands, dtype=np.int64).ravel()
    if x.size and x.min() < 0:
        raise InvalidInputError("demands must be non-negative")
    if workers <= 1 or x.size < 2 * workers:
        return _blelloch(x)

    blocks = np.array_split(x, workers)
    own_pool = pool is None
    pool = pool or ThreadPoolExecutor(max_workers=workers)
    try:
        local = list(pool.map(_blelloch, blocks))
        totals = np.array([b.sum() for b in blocks], dtype=np.int64)
        carry = _blelloch(totals)
        out = list(pool.map(lambda pair: pair[0] + pair[1], zip(local, carry)))
    finally:
        if own_pool:
            pool.shutdown()
    return np.concatenate(out)
