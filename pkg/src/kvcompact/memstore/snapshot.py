"""Versioned binary snapshot of a :class:`PagedKVStore`.

All integers little-endian. Layout::

    magic        8s   b"KVCSNAP\\0"
    version      u16
    page_bytes   u32, head_dim u32, metadata_bits u16, score_bits u16, position_bits u16
    high pair    u8 key_bits, u8 value_bits;  low pair  u8, u8
    num_pages    u32, table_len u32, max_seq_len u32
    free list    start u64, end u64, then num_pages x i32 slots
    tables       u32 count, then per entry (request-major, head-minor):
                 u16 id length, utf-8 id, u32 head, u32 left_count, u32 right_count,
                 table_len x i32 slots (-1 = empty)
    pages        per page id: u8 key_bits, u8 value_bits (both 0 = unconfigured),
                 u32 occupancy, page_bytes of segment data (see UnifiedPage.to_bytes)
"""

from __future__ import annotations

import io
import struct

import numpy as np

from ..errors import SchemaVersionError
from ..quant import PrecisionPair
from .geometry import PageGeometry
from .page import UnifiedPage
from .pagetable import BidirPageTableEntry
from .store import PagedKVStore

MAGIC = b"KVCSNAP\0"
VERSION = 1


def dump_snapshot(store: PagedKVStore) -> bytes:
    g = store.geometry
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    out.write(struct.pack("<IIHHH", g.page_bytes, g.head_dim, g.metadata_bits, g.score_bits, g.position_bits))
    out.write(struct.pack("<BBBB", store.high.key_bits, store.high.value_bits,
                          store.low.key_bits, store.low.value_bits))
    out.write(struct.pack("<III", store.num_pages, store.table_len, store.max_seq_len))
    fl = store.free_list
    out.write(struct.pack("<QQ", fl.start, fl.end))
    out.write(fl.slots.astype("<i4").tobytes())

    order = {r: i for i, r in enumerate(store.live_requests())}
    keys = sorted(store.tables, key=lambda k: (order.get(k[0], len(order)), k[0], k[1]))
    out.write(struct.pack("<I", len(keys)))
    for req, head in keys:
        e = store.tables[(req, head)]
        rid = req.encode("utf-8")
        out.write(struct.pack("<H", len(rid)) + rid)
        out.write(struct.pack("<III", head, e.left_count, e.right_count))
        out.write(e.slots.astype("<i4").tobytes())

    for page in store.pages:
        kb, vb = (page.pair.key_bits, page.pair.value_bits) if page.pair else (0, 0)
        out.write(struct.pack("<BBI", kb, vb, page.occupancy))
        out.write(page.to_bytes())
    return out.getvalue()


def load_snapshot(data: bytes) -> PagedKVStore:
    buf = io.BytesIO(data)

    def read(fmt):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise ValueError("truncated snapshot")
        return struct.unpack(fmt, chunk)

    if buf.read(8) != MAGIC:
        raise ValueError("not a KV store snapshot")
    (version,) = read("<H")
    if version != VERSION:
        raise SchemaVersionError(f"snapshot version {version}, expected {VERSION}")
    page_bytes, head_dim, meta, score, pos = read("<IIHHH")
    hk, hv, lk, lv = read("<BBBB")
    num_pages, table_len, max_seq_len = read("<III")
    geometry = PageGeometry(page_bytes, head_dim, meta, score, pos)
    store = PagedKVStore(num_pages, geometry, PrecisionPair(hk, hv), PrecisionPair(lk, lv),
                         max_seq_len=max_seq_len, table_len=table_len)
    start, end = read("<QQ")
    store.free_list.start, store.free_list.end = start, end
    store.free_list.slots = np.frombuffer(buf.read(4 * num_pages), dtype="<i4").astype(np.int64)

    (count,) = read("<I")
    for _ in range(count):
        (n,) = read("<H")
        req = buf.read(n).decode("utf-8")
        head, left, right = read("<III")
        e = BidirPageTableEntry(table_len)
        e.slots = np.frombuffer(buf.read(4 * table_len), dtype="<i4").astype(np.int64)
        e.left_count, e.right_count = left, right
        store.open_request(req, [])
        store._request_heads[req].add(head)
        store.tables[(req, head)] = e
        for pid in e.pages():
            store.owner[pid] = (req, head)

    for pid in range(num_pages):
        kb, vb, occ = read("<BBI")
        blob = buf.read(page_bytes)
        pair = PrecisionPair(kb, vb) if kb else None
        store.pages[pid] = UnifiedPage.from_bytes(pid, geometry, pair, occ, blob)
    return store
