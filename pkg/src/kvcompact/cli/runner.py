"""Run a workload end to end through the compression engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..engine import CompressionEngine, PromptInput, accounting
from ..memstore import PagedKVStore, PageGeometry
from ..policy import PolicyParams
from .workload import Workload


@dataclass
class RunResult:
    payload_fraction: Fraction
    full_fraction: float
    breakdown: dict[str, float]
    key_fraction: Fraction
    value_fraction: Fraction
    batch_size: list[int] = field(default_factory=list)
    bytes_touched: list[int] = field(default_factory=list)
    quality_error: float = 0.0
    quality_samples: int = 0
    per_request: list[dict] = field(default_factory=list)
    pages_allocated: int = 0
    pages_freed: int = 0


def default_pages(workload: Workload, geometry: PageGeometry, params: PolicyParams) -> int:
    """Enough pages to hold every request at once with every token kept high."""
    tph = geometry.tokens_per_page(params.high)
    return sum(workload.shape.heads * (math.ceil(r.total_len / tph) + 2) for r in workload.requests)


def reference_output(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Full-precision attention of queries ``(g, d)`` over every token so far."""
    logits = q @ keys.T / math.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ values


def run_workload(workload: Workload, params: PolicyParams, geometry: PageGeometry, num_pages: int | None = None,
                 workers: int = 1, measure_quality: bool = True) -> RunResult:
    """Prefill each request at its arrival tick, decode one token per tick until done.

    Accounting is taken for each request when it finishes, before its pages
    are released. Raises :class:`OutOfMemoryError` if the pool runs dry.
    """
    if not workload.requests:
        raise ValueError("workload has no requests")
    if geometry.head_dim != workload.shape.head_dim:
        raise ValueError("geometry head_dim differs from the workload")
    heads = workload.shape.heads
    max_len = max(r.total_len for r in workload.requests)
    pages = num_pages or default_pages(workload, geometry, params)
    # forced prompt classes bypass the window, so its slack cannot be counted on
    window = 0 if any(r.forced is not None for r in workload.requests) else params.window
    store = PagedKVStore(pages, geometry, params.high, params.low, max_seq_len=max_len, window=window,
                         workers=workers)
    key_bits = value_bits = base_bits = 0
    full_used = full_base = 0
    counts = {"high": 0, "low": 0, "pruned": 0}
    err_sum, err_n = 0.0, 0
    batch_sizes, touched, per_request = [], [], []
    pending = sorted(workload.requests, key=lambda r: (r.arrival, r.request_id))
    active: dict[str, object] = {}
    tick = 0
    with store, CompressionEngine(store, params, heads, workers) as eng:
        while pending or active:
            arriving = [r for r in pending if r.arrival <= tick]
            pending = [r for r in pending if r.arrival > tick]
            decoding = {rid: r for rid, r in active.items()}
            if arriving:
                eng.prefill([PromptInput(r.request_id, r.queries[:, :, :r.prompt_len].astype(np.float64),
                                         r.keys[:, :r.prompt_len].astype(np.float64),
                                         r.values[:, :r.prompt_len].astype(np.float64),
                                         r.forced, r.scores) for r in arriving])
                for r in arriving:
                    active[r.request_id] = [r, r.prompt_len]
            if decoding:
                batch = {}
                for rid, (r, t) in decoding.items():
                    batch[rid] = (r.queries[:, :, t].astype(np.float64), r.keys[:, t].astype(np.float64),
                                  r.values[:, t].astype(np.float64))
                outs = eng.decode(batch)
                for rid, (r, t) in decoding.items():
                    if measure_quality:
                        for h in range(heads):
                            ref = reference_output(batch[rid][0][h], r.keys[h, : t + 1].astype(np.float64),
                                                   r.values[h, : t + 1].astype(np.float64))
                            diff = np.linalg.norm(outs[rid][h] - ref, axis=1)
                            norm = np.linalg.norm(ref, axis=1)
                            err_sum += float(np.sum(diff / np.maximum(norm, 1e-300)))
                            err_n += ref.shape[0]
                    active[rid][1] = t + 1
            batch_sizes.append(len(active))
            touched.append(sum(accounting.bytes_touched(eng.request_states(rid)) for rid in active))
            for rid in [rid for rid, (r, t) in active.items() if t >= r.total_len]:
                states = eng.request_states(rid)
                bits = [accounting.head_bits(s) for s in states]
                kb = sum(b.key_bits for b in bits)
                vb = sum(b.value_bits for b in bits)
                bb = sum(b.baseline_bits for b in bits)
                key_bits, value_bits, base_bits = key_bits + kb, value_bits + vb, base_bits + bb
                used = sum(accounting.head_bytes(s) for s in states)
                base = sum(s.produced * s.d * 4 for s in states)
                full_used, full_base = full_used + used, full_base + base
                for s in states:
                    c = s.counts()
                    for k in counts:
                        counts[k] += c[k]
                per_request.append({"request_id": rid, "payload_fraction": float(Fraction(kb + vb, 2 * bb)),
                                    "full_fraction": used / base, "finished_tick": tick})
                eng.release(rid)
                del active[rid]
            tick += 1
        total = sum(counts.values())
        frac = {k: (counts[k] / total if total else 0.0) for k in ("pruned", "low", "high")}
        return RunResult(
            payload_fraction=Fraction(key_bits + value_bits, 2 * base_bits),
            full_fraction=full_used / full_base,
            breakdown=frac,
            key_fraction=Fraction(key_bits, base_bits),
            value_fraction=Fraction(value_bits, base_bits),
            batch_size=batch_sizes,
            bytes_touched=touched,
            quality_error=err_sum / err_n if err_n else 0.0,
            quality_samples=err_n,
            per_request=per_request,
            pages_allocated=store.pages_allocated,
            pages_freed=store.pages_freed,
        )
