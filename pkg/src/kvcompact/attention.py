"""Reference causal attention, significance statistics and sparsity analysis.

Everything here runs in float64 and is the oracle the compressed paths are
checked against. Token indices are 0-based; a score matrix is an ``l x l``
lower-triangular array whose row ``i`` holds the softmax weights query ``i``
assigns to tokens ``0..i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidStateError

# Relative slack when comparing a cumulative mass against target * total.
_MASS_RTOL = 1e-12


def _as_matrix(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _check_inputs(queries, keys, values) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = _as_matrix("queries", queries)
    k = _as_matrix("keys", keys)
    v = _as_matrix("values", values)
    if not (q.shape == k.shape == v.shape):
        raise InvalidInputError(f"shape mismatch: Q{q.shape} K{k.shape} V{v.shape}")
    if q.shape[0] == 0 or q.shape[1] == 0:
        raise InvalidInputError("sequence length and feature dim must be positive")
    return q, k, v


def causal_scores(queries, keys) -> np.ndarray:
    """Causal softmax matrix ``softmax(QK^T / sqrt(d))`` with the upper triangle zeroed."""
    q = _as_matrix("queries", queries)
    k = _as_matrix("keys", keys)
    if q.shape != k.shape:
        raise InvalidInputError(f"shape mismatch: Q{q.shape} K{k.shape}")
    l, d = q.shape
    logits = (q @ k.T) / np.sqrt(d)
    mask = np.tril(np.ones((l, l), dtype=bool))
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def causal_attention(queries, keys, values) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(outputs, scores)`` of standard causal attention.

    ``outputs[i] = sum_{j<=i} scores[i, j] * values[j]``.
    """
    q, k, v = _check_inputs(queries, keys, values)
    scores = causal_scores(q, k)
    return scores @ v, scores


@dataclass(frozen=True)
class CoefficientDecomposition:
    """Attention output for one query row as a weighted sum of unit vectors."""

    coefficients: np.ndarray  # (row + 1,)
    unit_vectors: np.ndarray  # (row + 1, d)

    def reconstruct(self) -> np.ndarray:
        return self.coefficients @ self.unit_vectors


def coefficient_decomposition(queries, keys, values, row: int) -> CoefficientDecomposition:
    q, k, v = _check_inputs(queries, keys, values)
    if not 0 <= row < q.shape[0]:
        raise InvalidInputError(f"row {row} outside [0, {q.shape[0]})")
    scores = causal_scores(q[: row + 1], k[: row + 1])[row]
    vals = v[: row + 1]
    norms = np.linalg.norm(vals, axis=1)
    units = np.zeros_like(vals)
    nonzero = norms > 0
    units[nonzero] = vals[nonzero] / norms[nonzero, None]
    coefs = np.where(nonzero, scores * norms, 0.0)
    return CoefficientDecomposition(coefficients=coefs, unit_vectors=units)


class SignificanceStats:
    """Per-token running totals of received attention.

    Indexed by token position. ``significance = received_sum / received_count``
    and is NaN for a tracked token that has not been attended to yet.
    """

    def __init__(self, capacity: int = 0):
        self.sums = np.zeros(capacity, dtype=np.float64)
        self.counts = np.zeros(capacity, dtype=np.int64)
        self.tracked = np.zeros(capacity, dtype=bool)

    def __len__(self) -> int:
        return int(self.tracked.sum())

    def _grow(self, size: int) -> None:
        if size <= self.sums.size:
            return
        new = max(size, 2 * self.sums.size, 16)
        for name, dtype in (("sums", np.float64), ("counts", np.int64), ("tracked", bool)):
            old = getattr(self, name)
            arr = np.zeros(new, dtype=dtype)
            arr[: old.size] = old
            setattr(self, name, arr)

    def track(self, position: int, received_sum: float = 0.0, received_count: int = 0) -> None:
        self._grow(position + 1)
        self.sums[position] = received_sum
        self.counts[position] = received_count
        self.tracked[position] = True

    def untrack(self, position: int) -> None:
        self.tracked[position] = False

    def is_tracked(self, position: int) -> bool:
        return 0 <= position < self.tracked.size and bool(self.tracked[position])

    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.tracked)

    def significance(self, positions) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.int64)
        try:
            ok = self.tracked[pos].all()
        except IndexError:
            ok = False
        if not ok or (pos.size and pos.min() < 0):
            raise InvalidStateError("significance requested for an untracked position")
        counts = self.counts[pos]
        out = self.sums[pos] / np.maximum(counts, 1)
        out[counts == 0] = np.nan
        return out

    def value(self, position: int) -> float:
        """Significance of one tracked position (NaN before its first score)."""
        if not self.is_tracked(position):
            raise InvalidStateError(f"position {position} is not tracked")
        c = int(self.counts[position])
        return float(self.sums[position]) / c if c else float("nan")

    def copy(self) -> "SignificanceStats":
        out = SignificanceStats()
        out.sums = self.sums.copy()
        out.counts = self.counts.copy()
        out.tracked = self.tracked.copy()
        return out


def prompt_significance(scores) -> SignificanceStats:
    """Stats after the prompt: token ``i`` averages the ``N-1-i`` scores from later rows."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidInputError(f"score matrix must be square, got {s.shape}")
    n = s.shape[0]
    stats = SignificanceStats(n)
    if n < 2:
        return stats
    lower = np.tril(s, k=-1)
    stats.sums[:] = lower.sum(axis=0)
    stats.counts[:] = n - 1 - np.arange(n)
    stats.tracked[:] = True
    return stats


def aggregate_gqa(per_query_head_scores: Sequence) -> np.ndarray:
    """Element-wise maximum over the query heads that share one KV head."""
    if len(per_query_head_scores) == 0:
        raise InvalidInputError("need at least one score matrix")
    mats = [np.asarray(m, dtype=np.float64) for m in per_query_head_scores]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise InvalidInputError("score matrices differ in shape")
    return reduce(np.maximum, mats)


def update_significance_generation(stats: SignificanceStats, new_scores, live_positions: Iterable[int]) -> SignificanceStats:
    """Fold one step's (aggregated) score row into the running averages, in place."""
    scores = np.asarray(new_scores, dtype=np.float64)
    pos = np.asarray(list(live_positions) if not isinstance(live_positions, np.ndarray) else live_positions,
                     dtype=np.int64)
    if scores.shape != pos.shape:
        raise InvalidInputError("scores and positions are not aligned")
    if pos.size == 0:
        return stats
    if pos.min() < 0 or pos.max() >= stats.tracked.size or not stats.tracked[pos].all():
        raise InvalidStateError("score update for an untracked position")
    np.add.at(stats.sums, pos, scores)
    np.add.at(stats.counts, pos, 1)
    return stats


def critical_token_count(mass, target: float = 0.95) -> int:
    """Fewest tokens whose combined mass reaches ``target`` of the total."""
    m = np.asarray(mass, dtype=np.float64).ravel()
    if m.size == 0:
        raise InvalidInputError("empty mass vector")
    if not 0.0 < target <= 1.0:
        raise InvalidInputError(f"target must lie in (0, 1], got {target}")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise InvalidInputError("mass entries must be finite and non-negative")
    total = m.sum()
    if total <= 0:
        raise InvalidInputError("total mass is zero")
    csum = np.cumsum(np.sort(m)[::-1])
    need = target * total * (1.0 - _MASS_RTOL)
    k = int(np.searchsorted(csum, need, side="left")) + 1
    return min(k, m.size)
