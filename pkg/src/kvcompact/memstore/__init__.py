"""Paged KV storage with prefix-sum coordinated allocation and recycling."""

from .freelist import CircularFreeList
from .geometry import PageGeometry, page_table_metadata_bytes, table_length
from .page import UnifiedPage
from .pagetable import BidirPageTableEntry, MultiLevelTable, UnidirPageTableEntry
from .scan import prefix_sum_exclusive
from .snapshot import dump_snapshot, load_snapshot
from .store import HeadGrant, HeadPlan, PagedKVStore, PromptTrim

__all__ = [
    "BidirPageTableEntry", "CircularFreeList", "HeadGrant", "HeadPlan", "MultiLevelTable", "PageGeometry",
    "PagedKVStore", "PromptTrim", "UnidirPageTableEntry", "UnifiedPage", "dump_snapshot", "load_snapshot",
    "page_table_metadata_bytes", "prefix_sum_exclusive", "table_length",
]
