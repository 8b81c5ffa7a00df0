"""Compressed inference path: per-head caches, attention over pages, accounting."""

from ..layout import LayoutParams, pack_keys, pack_values, unpack_keys, unpack_values
from .accounting import breakdown, bytes_touched, full_fraction, head_bits, payload_fraction
from .attention import AttentionResult, Segment, attend, merge, partial, split_attention
from .batch import CompressionEngine, PromptInput
from .head import HeadCacheState, StepPlan, encode, lower, reconstruct


def compressed_attention(query, state: HeadCacheState) -> AttentionResult:
    """Attention of ``query`` over high pages, then low pages, then the window."""
    return state.attend(query)


__all__ = [
    "AttentionResult", "CompressionEngine", "HeadCacheState", "LayoutParams", "PromptInput", "Segment",
    "StepPlan", "attend", "breakdown", "bytes_touched", "compressed_attention", "encode", "full_fraction",
    "head_bits", "lower", "merge", "pack_keys", "pack_values", "partial", "payload_fraction", "reconstruct",
    "split_attention", "unpack_keys", "unpack_values",
]
