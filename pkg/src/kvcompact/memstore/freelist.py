from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError


class CircularFreeList:
    """Ring of all page IDs with an allocation pointer and a recycling pointer.

    ``start`` and ``end`` are monotone counters; the slot they address is the
    counter modulo the ring size. Free IDs always occupy the contiguous
    modular interval ``[start, end)``, so ``free_count == end - start``.
    """

    def __init__(self, num_pages: int):
        if num_pages <= 0:
            raise InvalidInputError("free list needs at least one page")
        self.size = num_pages
        self.slots = np.arange(num_pages, dtype=np.int64)
        self.start = 0
        self.end = num_pages

    @property
    def free_count(self) -> int:
        return self.end - self.start

    @property
    def start_slot(self) -> int:
        return self.start % self.size

    @property
    def end_slot(self) -> int:
        return self.end % self.size

    def _index(self, base: int, offset: int, count: int) -> np.ndarray:
        return (base + offset + np.arange(count)) % self.size

    def read(self, offset: int, count: int) -> np.ndarray:
        """Page IDs in ``[start + offset, start + offset + count)``; does not move pointers."""
        if offset < 0 or offset + count > self.free_count:
            raise InvalidInputError("read outside the free region")
        return self.slots[self._index(self.start, offset, count)].copy()

    def write(self, offset: int, page_ids) -> None:
        """Store recycled IDs at ``[end + offset, ...)``; does not move pointers."""
        ids = np.asarray(page_ids, dtype=np.int64)
        if offset < 0 or self.free_count + offset + ids.size > self.size:
            raise InvalidInputError("write would overrun the free region")
        self.slots[self._index(self.end, offset, ids.size)] = ids

    def advance_start(self, count: int) -> None:
        if count < 0 or count > self.free_count:
            raise InvalidInputError("cannot allocate more than the free count")
        self.start += count

    def advance_end(self, count: int) -> None:
        if count < 0 or self.free_count + count > self.size:
            raise InvalidInputError("cannot recycle more pages than are in use")
        self.end += count

    def free_pages(self) -> np.ndarray:
        """Free IDs in allocation order."""
        return self.slots[self._index(self.start, 0, self.free_count)].copy()

    def copy(self) -> "CircularFreeList":
        out = CircularFreeList.__new__(CircularFreeList)
        out.size, out.start, out.end = self.size, self.start, self.end
        out.slots = self.slots.copy()
        return out
