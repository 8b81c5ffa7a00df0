"""Memory accounting for compressed heads.

Two modes. Payload counts only code bits (high tokens at the high pair, low
tokens at the low pair, window tokens at 16 bits or the high pair) against a
16-bit cache of every produced token, and is exact. Full mode counts whole
pages plus the window's bytes, so it includes metadata, score and position
segments and the slack in partially filled pages.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from ..errors import InvalidInputError
from .head import HeadCacheState

FP16_BITS = 16


@dataclass(frozen=True)
class HeadBits:
    key_bits: int
    value_bits: int
    baseline_bits: int  # per side: produced * d * 16

    @property
    def key_fraction(self) -> Fraction:
        return Fraction(self.key_bits, self.baseline_bits)

    @property
    def value_fraction(self) -> Fraction:
        return Fraction(self.value_bits, self.baseline_bits)

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.key_bits + self.value_bits, 2 * self.baseline_bits)


def _window_pair_bits(state: HeadCacheState) -> tuple[int, int]:
    if state.params.window_at_high:
        return state.params.high.key_bits, state.params.high.value_bits
    return FP16_BITS, FP16_BITS


def head_bits(state: HeadCacheState) -> HeadBits:
    d = state.d
    hp, lp = state.params.high, state.params.low
    wk, wv = _window_pair_bits(state)
    nh, nl, nw = len(state.high), len(state.low), len(state.window)
    if state.produced == 0:
        raise InvalidInputError(f"head {state.key} has produced no tokens")
    return HeadBits(
        key_bits=d * (nh * hp.key_bits + nl * lp.key_bits + nw * wk),
        value_bits=d * (nh * hp.value_bits + nl * lp.value_bits + nw * wv),
        baseline_bits=state.produced * d * FP16_BITS,
    )


def payload_fraction(states: Iterable[HeadCacheState]) -> Fraction:
    bits = [head_bits(s) for s in states]
    if not bits:
        raise InvalidInputError("no heads to account")
    stored = sum(b.key_bits + b.value_bits for b in bits)
    return Fraction(stored, sum(2 * b.baseline_bits for b in bits))


def window_bytes(state: HeadCacheState) -> int:
    wk, wv = _window_pair_bits(state)
    per_token = state.d * (wk + wv)
    if state.params.window_at_high:
        per_token += 2 * state.store.geometry.metadata_bits
    return len(state.window) * per_token // 8


def head_bytes(state: HeadCacheState) -> int:
    pages = len(state.high_pages) + len(state.low_pages)
    return pages * state.store.geometry.page_bytes + window_bytes(state)


def full_fraction(states: Iterable[HeadCacheState]) -> float:
    states = list(states)
    if not states:
        raise InvalidInputError("no heads to account")
    used = sum(head_bytes(s) for s in states)
    base = sum(s.produced * s.d * 2 * FP16_BITS // 8 for s in states)
    return used / base


def breakdown(states: Iterable[HeadCacheState]) -> dict[str, float]:
    """Fractions of non-window tokens that are pruned, low and high."""
    high = low = pruned = 0
    for s in states:
        high += len(s.high)
        low += len(s.low)
        pruned += len(s.pruned)
    total = high + low + pruned
    if total == 0:
        return {"pruned": 0.0, "low": 0.0, "high": 0.0}
    return {"pruned": pruned / total, "low": low / total, "high": high / total}


def bytes_touched(states: Iterable[HeadCacheState]) -> int:
    """Bytes an attention pass reads: every held page plus the window."""
    return sum(head_bytes(s) for s in states)
