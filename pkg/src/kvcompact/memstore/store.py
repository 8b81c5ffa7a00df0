from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import InvalidInputError, InvalidStateError, OutOfMemoryError, OwnershipError
from ..policy import TokenClass
from ..quant import K4V2, K8V4, PrecisionPair
from .freelist import CircularFreeList
from .geometry import PageGeometry, table_length
from .page import UnifiedPage
from .pagetable import BidirPageTableEntry
from .scan import prefix_sum_exclusive

HeadKey = tuple[str, int]


@dataclass
class HeadPlan:
    """One head's demand for a coordination step."""

    request: str
    head: int
    alloc_high: int = 0
    alloc_low: int = 0
    free: Sequence[int] = ()
    configure: bool = True  # False leaves new pages unconfigured (prompt over-allocation)

    @property
    def key(self) -> HeadKey:
        return (self.request, self.head)


@dataclass
class HeadGrant:
    high: list[int] = field(default_factory=list)
    low: list[int] = field(default_factory=list)
    freed: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class PromptTrim:
    request: str
    head: int
    high_pages: int
    low_pages: int


class PagedKVStore:
    """Unified pages, a circular free list and one bidirectional table entry per (request, head).

    All allocation and recycling goes through :meth:`compact`, which turns
    per-head demands into disjoint regions of the free list with an exclusive
    prefix sum. Plans are ordered request-major (admission order), head-minor;
    any ``workers`` value yields the same state as ``workers=1``.
    """

    def __init__(self, num_pages: int, geometry: PageGeometry | None = None, high: PrecisionPair = K8V4,
                 low: PrecisionPair = K4V2, max_seq_len: int = 4096, window: int = 0, workers: int = 1,
                 table_len: int | None = None):
        self.geometry = geometry or PageGeometry()
        self.high = high
        self.low = low
        self.max_seq_len = max_seq_len
        self.table_len = table_len or table_length(max_seq_len, self.geometry, high, window)
        self.num_pages = num_pages
        self.free_list = CircularFreeList(num_pages)
        self.pages = [UnifiedPage(i, self.geometry) for i in range(num_pages)]
        self.owner: list[HeadKey | None] = [None] * num_pages
        self.tables: dict[HeadKey, BidirPageTableEntry] = {}
        self._request_order: dict[str, int] = {}
        self._request_heads: dict[str, set[int]] = {}
        self._released: set[str] = set()
        self.workers = max(1, workers)
        self._pool: ThreadPoolExecutor | None = None
        self.pages_allocated = 0
        self.pages_freed = 0

    # -- bookkeeping ---------------------------------------------------

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def free_count(self) -> int:
        return self.free_list.free_count

    def page(self, page_id: int) -> UnifiedPage:
        return self.pages[page_id]

    def entry(self, request: str, head: int) -> BidirPageTableEntry:
        try:
            return self.tables[(request, head)]
        except KeyError:
            raise InvalidStateError(f"no table entry for request {request!r} head {head}") from None

    def open_request(self, request: str, heads: Iterable[int]) -> None:
        if request in self._released:
            raise InvalidStateError(f"request {request!r} was already released")
        self._request_order.setdefault(request, len(self._request_order))
        hs = self._request_heads.setdefault(request, set())
        for h in heads:
            hs.add(h)
            self.tables.setdefault((request, h), BidirPageTableEntry(self.table_len))

    def live_requests(self) -> list[str]:
        return sorted(self._request_heads, key=self._request_order.__getitem__)

    def _ordered(self, plans: Iterable[HeadPlan]) -> list[HeadPlan]:
        plans = list(plans)
        for p in plans:
            if p.request not in self._request_heads:
                self.open_request(p.request, [p.head])
            elif (p.request, p.head) not in self.tables:
                self.open_request(p.request, [p.head])
        plans.sort(key=lambda p: (self._request_order[p.request], p.head))
        keys = [p.key for p in plans]
        if len(set(keys)) != len(keys):
            raise InvalidInputError("more than one plan for the same head")
        return plans

    def _map(self, fn, items):
        if self.workers <= 1 or len(items) < 2:
            return [fn(x) for x in items]
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        return list(self._pool.map(fn, items))

    # -- coordination --------------------------------------------------

    def compact(self, plans: Iterable[HeadPlan]) -> dict[HeadKey, HeadGrant]:
        """Coordinate one step of allocations and recycling for many heads.

        Raises :class:`OutOfMemoryError` (nothing mutated) when the combined
        allocation exceeds the free count, and :class:`OwnershipError` when a
        head frees a page it does not hold.
        """
        plans = self._ordered(plans)
        if not plans:
            return {}
        for p in plans:
            if p.alloc_high < 0 or p.alloc_low < 0:
                raise InvalidInputError("negative allocation")
            seen = set()
            for pid in p.free:
                pid = int(pid)
                if not 0 <= pid < self.num_pages or self.owner[pid] != p.key or pid in seen:
                    raise OwnershipError(f"head {p.key} does not own page {pid}")
                seen.add(pid)
        alloc = np.array([p.alloc_high + p.alloc_low for p in plans], dtype=np.int64)
        frees = np.array([len(p.free) for p in plans], dtype=np.int64)
        total_alloc, total_free = int(alloc.sum()), int(frees.sum())
        if total_alloc > self.free_count:
            raise OutOfMemoryError(total_alloc, self.free_count)

        alloc_off = prefix_sum_exclusive(alloc, self.workers)
        free_off = prefix_sum_exclusive(frees, self.workers)

        def run(k: int) -> HeadGrant:
            p = plans[k]
            entry = self.tables[p.key]
            grant = HeadGrant()
            freed = [int(x) for x in p.free]
            for pid in freed:
                if pid in entry.pages():
                    entry.remove(pid)
                self.owner[pid] = None
                self.pages[pid].reset()
            self.free_list.write(int(free_off[k]), freed)
            grant.freed = freed
            ids = self.free_list.read(int(alloc_off[k]), int(alloc[k])).tolist()
            for i, pid in enumerate(ids):
                cls = TokenClass.HIGH if i < p.alloc_high else TokenClass.LOW
                entry.append(pid, cls)
                self.owner[pid] = p.key
                if p.configure:
                    self.pages[pid].configure(self.high if cls is TokenClass.HIGH else self.low)
                (grant.high if cls is TokenClass.HIGH else grant.low).append(pid)
            return grant

        grants = self._map(run, list(range(len(plans))))
        self.free_list.advance_start(total_alloc)
        self.free_list.advance_end(total_free)
        self.pages_allocated += total_alloc
        self.pages_freed += total_free
        return {p.key: g for p, g in zip(plans, grants)}

    # -- workflows -----------------------------------------------------

    def conservative_alloc_prompt(self, requests: Sequence[tuple[str, Sequence[int]]]) -> dict[HeadKey, list[int]]:
        """Give each head ``ceil(len / tokens_per_page(high))`` pages as if every token stayed high.

        ``requests`` is ``[(request_id, [prompt_tokens_per_head, ...]), ...]``.
        The pages stay unconfigured until :meth:`finalize_prompt`.
        """
        plans = []
        for request, lengths in requests:
            self.open_request(request, range(len(lengths)))
            for head, n in enumerate(lengths):
                if n < 0:
                    raise InvalidInputError("negative prompt length")
                plans.append(HeadPlan(request, head, alloc_high=self.geometry.pages_for(n, self.high),
                                      configure=False))
        grants = self.compact(plans)
        return {k: g.high for k, g in grants.items()}

    def finalize_prompt(self, trims: Sequence[PromptTrim]) -> dict[HeadKey, HeadGrant]:
        """Shrink over-allocated prompt pages to the counts the planning phase chose.

        Of the ``n`` provisional pages, the first ``high_pages`` stay high, the
        last ``low_pages`` become low (moved to the right end of the entry) and
        the rest are recycled. If the two partial tail pages need one page more
        than was reserved, it is allocated here.
        """
        plans, layouts = [], {}
        extra_total = 0
        for t in trims:
            entry = self.entry(t.request, t.head)
            prov = entry.high_pages()
            n = len(prov)
            if entry.right_count:
                raise InvalidStateError(f"head {(t.request, t.head)} already finalized")
            if t.high_pages > n:
                raise InvalidInputError("more high pages requested than were reserved")
            if t.high_pages + t.low_pages <= n:
                high = prov[: t.high_pages]
                low = [prov[n - 1 - k] for k in range(t.low_pages)]
                free = prov[t.high_pages: n - t.low_pages]
                extra = 0
            else:
                high = prov[: t.high_pages]
                low = prov[t.high_pages:][::-1]
                free = []
                extra = t.low_pages - len(low)
            extra_total += extra
            layouts[(t.request, t.head)] = (high, low)
            plans.append(HeadPlan(t.request, t.head, alloc_low=extra, free=free))
        if extra_total > self.free_count:
            raise OutOfMemoryError(extra_total, self.free_count)
        for (req, head), (high, low) in layouts.items():
            self.tables[(req, head)].rebuild(high, low)
            for pid in high:
                self.pages[pid].configure(self.high)
            for pid in low:
                self.pages[pid].configure(self.low)
        grants = self.compact(plans)
        for key, g in grants.items():
            high, low = layouts[key]
            g.high = list(high)
            g.low = list(low) + g.low
        return grants

    def generation_alloc(self, needs: Sequence[tuple[str, int, TokenClass]]) -> dict[HeadKey, int]:
        """At most one new page per head, for the section whose tail page is full."""
        plans = []
        for request, head, cls in needs:
            if cls is TokenClass.HIGH:
                plans.append(HeadPlan(request, head, alloc_high=1))
            elif cls is TokenClass.LOW:
                plans.append(HeadPlan(request, head, alloc_low=1))
            else:
                raise InvalidInputError("pages are only allocated for High or Low")
        grants = self.compact(plans)
        return {k: (g.high or g.low)[0] for k, g in grants.items()}

    def release_request(self, request: str) -> list[int]:
        """Recycle every page held by ``request`` and drop its table entries."""
        if request in self._released or request not in self._request_heads:
            raise InvalidStateError(f"request {request!r} is not live")
        heads = sorted(self._request_heads[request])
        plans = [HeadPlan(request, h, free=self.tables[(request, h)].pages()) for h in heads]
        grants = self.compact(plans)
        for h in heads:
            del self.tables[(request, h)]
        del self._request_heads[request]
        self._released.add(request)
        return [pid for h in heads for pid in grants[(request, h)].freed]

    # -- inspection ----------------------------------------------------

    def held_pages(self) -> int:
        return self.num_pages - self.free_count

    def audit(self) -> None:
        """Check permutation conservation, free-region contiguity and ownership consistency."""
        free = self.free_list.free_pages()
        if len(set(free.tolist())) != free.size:
            raise AssertionError("duplicate page in free region")
        table_pages: list[int] = []
        for key, entry in self.tables.items():
            if entry.left_count + entry.right_count > entry.length:
                raise AssertionError(f"table overflow at {key}")
            for pid in entry.pages():
                if self.owner[pid] != key:
                    raise AssertionError(f"page {pid} in table {key} but owned by {self.owner[pid]}")
                table_pages.append(pid)
        if len(set(table_pages)) != len(table_pages):
            raise AssertionError("page referenced by two table slots")
        combined = np.concatenate([free, np.asarray(table_pages, dtype=np.int64)])
        if combined.size != self.num_pages or not np.array_equal(np.sort(combined), np.arange(self.num_pages)):
            raise AssertionError("free list and tables do not partition the page IDs")
        owned = sum(o is not None for o in self.owner)
        if owned != len(table_pages):
            raise AssertionError("owner map disagrees with the tables")

    def state(self) -> tuple:
        """Hashable summary used to compare executions."""
        tables = tuple(sorted((k, tuple(e.slots.tolist()), e.left_count, e.right_count)
                              for k, e in self.tables.items()))
        return (self.free_list.start, self.free_list.end, tuple(self.free_list.slots.tolist()),
                tables, tuple(self.owner))
