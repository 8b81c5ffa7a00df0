"""Attention over a compressed cache, unsplit and split into segments.

A segment is a set of tokens (positions, dequantized keys, values). The
unsplit path concatenates segments; the split path computes one partial per
segment (running max logit, normalizer, unnormalized output) and merges the
partials with the streaming-softmax rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError


@dataclass(frozen=True)
class Segment:
    positions: np.ndarray  # (n,)
    keys: np.ndarray  # (n, d)
    values: np.ndarray  # (n, d)
    label: str = ""

    def __len__(self) -> int:
        return int(self.positions.size)


@dataclass(frozen=True)
class AttentionResult:
    output: np.ndarray  # (g, d)
    positions: np.ndarray  # (n,) in segment order
    scores: np.ndarray  # (g, n) softmax weights per query head

    @property
    def aggregated(self) -> np.ndarray:
        """Element-wise max over query heads, the form used for significance."""
        return self.scores.max(axis=0)


@dataclass(frozen=True)
class Partial:
    """Unnormalized attention over one segment."""

    max_logit: np.ndarray  # (g,)
    normalizer: np.ndarray  # (g,)
    acc: np.ndarray  # (g, d)


def _queries(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or not np.all(np.isfinite(q)):
        raise InvalidInputError("query must be a finite (d,) or (g, d) array")
    return q


def _check_disjoint(segments) -> None:
    if not segments:
        raise InvalidInputError("no segments to attend over")
    allpos = np.concatenate([s.positions for s in segments])
    if np.unique(allpos).size != allpos.size:
        raise InvalidInputError("segments overlap")


def attend(query, segments) -> AttentionResult:
    """Softmax attention over the union of ``segments`` in the given order."""
    q = _queries(query)
    _check_disjoint(segments)
    pos = np.concatenate([s.positions for s in segments]).astype(np.int64)
    if pos.size == 0:
        raise InvalidInputError("cache is empty")
    k = np.concatenate([s.keys for s in segments])
    v = np.concatenate([s.values for s in segments])
    if k.shape[1] != q.shape[1]:
        raise InvalidInputError("query and key dimensions differ")
    logits = q @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return AttentionResult(output=w @ v, positions=pos, scores=w)


def partial(query, segment: Segment) -> Partial:
    q = _queries(query)
    g, d = q.shape
    if len(segment) == 0:
        return Partial(np.full(g, -np.inf), np.zeros(g), np.zeros((g, d)))
    logits = q @ segment.keys.T / np.sqrt(d)
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    return Partial(m, e.sum(axis=1), e @ segment.values)


def merge(a: Partial, b: Partial) -> Partial:
    m = np.maximum(a.max_logit, b.max_logit)
    # an empty side has max -inf and contributes nothing
    with np.errstate(invalid="ignore"):
        sa = np.where(np.isneginf(a.max_logit), 0.0, np.exp(a.max_logit - m))
        sb = np.where(np.isneginf(b.max_logit), 0.0, np.exp(b.max_logit - m))
    return Partial(m, a.normalizer * sa + b.normalizer * sb, a.acc * sa[:, None] + b.acc * sb[:, None])


def split_attention(query, segments) -> np.ndarray:
    """Attention output computed per segment and merged; shape ``(g, d)``."""
    q = _queries(query)
    _check_disjoint(segments)
    acc = None
    for seg in segments:
        p = partial(q, seg)
        acc = p if acc is None else merge(acc, p)
    if acc is None or not np.all(acc.normalizer > 0):
        raise InvalidInputError("cache is empty")
    return acc.acc / acc.normalizer[:, None]
