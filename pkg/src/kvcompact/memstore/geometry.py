from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import InvalidInputError
from ..quant import PrecisionPair


@dataclass(frozen=True)
class PageGeometry:
    """Byte geometry of a unified page.

    A page holds six segments per token: key codes, key metadata, value codes,
    value metadata, score and position. ``metadata_bits`` is per vector
    (a 16-bit scale plus a 16-bit zero point).
    """

    page_bytes: int = 1024
    head_dim: int = 128
    metadata_bits: int = 32
    score_bits: int = 32
    position_bits: int = 32

    def __post_init__(self):
        if self.page_bytes <= 0 or self.head_dim <= 0:
            raise InvalidInputError("page_bytes and head_dim must be positive")
        if min(self.metadata_bits, self.score_bits, self.position_bits) < 0:
            raise InvalidInputError("segment widths must be non-negative")

    def token_bits(self, pair: PrecisionPair) -> int:
        d = self.head_dim
        return (d * pair.key_bits + self.metadata_bits + d * pair.value_bits + self.metadata_bits
                + self.score_bits + self.position_bits)

    def tokens_per_page(self, pair: PrecisionPair) -> int:
        n = (self.page_bytes * 8) // self.token_bits(pair)
        if n < 1:
            raise InvalidInputError(f"a {self.page_bytes}-byte page cannot hold one {pair} token")
        return n

    def pages_for(self, tokens: int, pair: PrecisionPair) -> int:
        return math.ceil(tokens / self.tokens_per_page(pair)) if tokens > 0 else 0


def table_length(max_seq_len: int, geometry: PageGeometry, high: PrecisionPair, window: int = 0) -> int:
    """Slots per bidirectional page-table entry.

    ``ceil(max_seq_len / tokens_per_page(high))``. The high and low tail pages
    can both be partially filled, which costs one page beyond that bound; a
    recent window of at least one high page of tokens (kept outside the pages)
    absorbs it, otherwise one spare slot is added.
    """
    per_page = geometry.tokens_per_page(high)
    base = math.ceil(max_seq_len / per_page)
    return base if window >= per_page else base + 1


def page_table_metadata_bytes(batch: int, layers: int, kv_heads: int, table_len: int, slot_bytes: int = 4) -> int:
    """Total size of all bidirectional page-table entries for a batch."""
    if min(batch, layers, kv_heads, table_len, slot_bytes) <= 0:
        raise InvalidInputError("all inputs must be positive")
    return batch * layers * kv_heads * table_len * slot_bytes
