from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import InvalidInputError, InvalidStateError, TableOverflowError
from ..policy import TokenClass

EMPTY = -1


class BidirPageTableEntry:
    """Fixed-length slot array for one (request, head).

    High-precision page IDs grow from the left, low-precision IDs from the
    right, so both share one allocation of ``length`` slots.
    """

    def __init__(self, length: int):
        if length <= 0:
            raise InvalidInputError("table length must be positive")
        self.length = length
        self.slots = np.full(length, EMPTY, dtype=np.int64)
        self.left_count = 0
        self.right_count = 0

    def __len__(self) -> int:
        return self.left_count + self.right_count

    def append(self, page_id: int, cls: TokenClass) -> None:
        if self.left_count + self.right_count >= self.length:
            raise TableOverflowError(
                f"entry full: {self.left_count} high + {self.right_count} low = {self.length} slots")
        if cls is TokenClass.HIGH:
            self.slots[self.left_count] = page_id
            self.left_count += 1
        elif cls is TokenClass.LOW:
            self.slots[self.length - 1 - self.right_count] = page_id
            self.right_count += 1
        else:
            raise InvalidInputError("only High and Low pages live in a page table")

    def high_pages(self) -> list[int]:
        return self.slots[: self.left_count].tolist()

    def low_pages(self) -> list[int]:
        """Low-precision page IDs in append order (rightmost first)."""
        return self.slots[::-1][: self.right_count].tolist()

    def pages(self) -> list[int]:
        return self.high_pages() + self.low_pages()

    def remove(self, page_id: int) -> TokenClass:
        """Drop one page, closing the gap on its side. Returns the side it was on."""
        high = self.high_pages()
        if page_id in high:
            high.remove(page_id)
            self.slots[: self.left_count] = EMPTY
            self.slots[: len(high)] = high
            self.left_count = len(high)
            return TokenClass.HIGH
        low = self.low_pages()
        if page_id in low:
            low.remove(page_id)
            self.slots[self.length - self.right_count:] = EMPTY
            self.right_count = 0
            for p in low:
                self.append(p, TokenClass.LOW)
            return TokenClass.LOW
        raise InvalidStateError(f"page {page_id} is not in this entry")

    def rebuild(self, high: Sequence[int], low: Sequence[int]) -> None:
        self.reset()
        for p in high:
            self.append(int(p), TokenClass.HIGH)
        for p in low:
            self.append(int(p), TokenClass.LOW)

    def reset(self) -> None:
        self.slots[:] = EMPTY
        self.left_count = 0
        self.right_count = 0

    def copy(self) -> "BidirPageTableEntry":
        out = BidirPageTableEntry(self.length)
        out.slots = self.slots.copy()
        out.left_count, out.right_count = self.left_count, self.right_count
        return out

    def __eq__(self, other):
        return (isinstance(other, BidirPageTableEntry) and self.length == other.length
                and self.left_count == other.left_count and self.right_count == other.right_count
                and np.array_equal(self.slots, other.slots))


class UnidirPageTableEntry:
    """Single-precision page list, grown from the left only."""

    def __init__(self, length: int):
        if length <= 0:
            raise InvalidInputError("table length must be positive")
        self.length = length
        self.slots = np.full(length, EMPTY, dtype=np.int64)
        self.count = 0

    def append(self, page_id: int) -> None:
        if self.count >= self.length:
            raise TableOverflowError("unidirectional entry full")
        self.slots[self.count] = page_id
        self.count += 1

    def pages(self) -> list[int]:
        return self.slots[: self.count].tolist()


class MultiLevelTable:
    """Page tables for more than two precision levels.

    Levels are paired off, highest first: each pair shares a bidirectional
    entry (first level on the left, second on the right); an odd level left
    over gets a unidirectional entry. Three levels use one of each, four use
    two bidirectional entries.
    """

    def __init__(self, lengths: Sequence[int]):
        self.num_levels = len(lengths)
        if self.num_levels == 0:
            raise InvalidInputError("need at least one precision level")
        self.tables: list[BidirPageTableEntry | UnidirPageTableEntry] = []
        for k in range(0, self.num_levels - 1, 2):
            self.tables.append(BidirPageTableEntry(max(lengths[k], lengths[k + 1])))
        if self.num_levels % 2:
            self.tables.append(UnidirPageTableEntry(lengths[-1]))

    def _locate(self, level: int):
        if not 0 <= level < self.num_levels:
            raise InvalidInputError(f"level {level} out of range")
        table = self.tables[level // 2]
        side = TokenClass.HIGH if level % 2 == 0 else TokenClass.LOW
        return table, side

    def append(self, level: int, page_id: int) -> None:
        table, side = self._locate(level)
        if isinstance(table, UnidirPageTableEntry):
            table.append(page_id)
        else:
            table.append(page_id, side)

    def pages(self, level: int) -> list[int]:
        table, side = self._locate(level)
        if isinstance(table, UnidirPageTableEntry):
            return table.pages()
        return table.high_pages() if side is TokenClass.HIGH else table.low_pages()

    @staticmethod
    def tables_needed(num_levels: int) -> tuple[int, int]:
        """(bidirectional, unidirectional) entries for ``num_levels`` levels."""
        return num_levels // 2, num_levels % 2

    def slot_count(self) -> int:
        return sum(t.length for t in self.tables)


def required_length(max_tokens: int, tokens_per_page: int) -> int:
    return math.ceil(max_tokens / tokens_per_page)
