"""Discrete-event serving simulation over logical ticks.

Each request's page demand is measured once by running the engine on it in
isolation (the policy's decisions do not depend on which physical pages a
head holds). The serving loop then replays those demands against a real
:class:`PagedKVStore`: conservative prompt allocation and trim on admission,
one coordinated ``generation_alloc`` per tick, ``release_request`` on
completion. Admission is FIFO. A request reserves the most pages it will hold
after its prompt is trimmed; the larger conservative prompt allocation only
has to fit in pages that no running request has a claim on, since it is
returned within the same tick. The store therefore never runs out mid-request.

The baseline replays the same arrivals against an uncompressed 16-bit cache
with plain paged storage (no metadata, score or position segments).

Recent-window tokens are held outside the compressed pages; the simulation
charges them as extra pages per head, sized at 16 bits per element (or at the
high pair when the window is stored quantized).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from fractions import Fraction

import numpy as np

from ..engine import CompressionEngine, PromptInput, accounting
from ..errors import ConfigError
from ..memstore import HeadPlan, PagedKVStore, PageGeometry, PromptTrim
from ..policy import PolicyParams, TokenClass
from ..quant import FP16
from .workload import RequestTrace, Workload


@dataclass
class Trajectory:
    """Page demand of one request, per head."""

    request_id: str
    arrival: int
    prompt_len: int
    prompt_reserve: list[int]  # conservative prompt pages per head
    prompt_keep: list[tuple[int, int]]  # (high, low) pages per head after the trim
    growth: list[list[TokenClass | None]]  # per decode step, per head: which section gained a page
    window_pages: int  # per head, held for the whole lifetime
    key_bits: int = 0
    value_bits: int = 0
    baseline_bits: int = 0

    @property
    def heads(self) -> int:
        return len(self.prompt_keep)

    @property
    def steps(self) -> int:
        return len(self.growth)

    @cached_property
    def held(self) -> list[int]:
        """Pages held after the trim and after each decode step, window included."""
        out = [sum(h + l for h, l in self.prompt_keep) + self.window_pages * self.heads]
        for step in self.growth:
            out.append(out[-1] + sum(1 for g in step if g is not None))
        return out

    @property
    def steady(self) -> int:
        return max(self.held)

    @property
    def transient(self) -> int:
        """Pages taken by the conservative prompt allocation before the trim."""
        return sum(self.prompt_reserve)

    @property
    def peak(self) -> int:
        return max(self.steady, self.transient + self.window_pages * self.heads)


def window_tokens_per_page(geometry: PageGeometry, params: PolicyParams) -> int:
    return geometry.tokens_per_page(params.high if params.window_at_high else FP16)


def compressed_trajectory(req: RequestTrace, heads: int, params: PolicyParams, geometry: PageGeometry,
                          workers: int = 1) -> Trajectory:
    tph = geometry.tokens_per_page(params.high)
    pages = heads * (math.ceil(req.total_len / tph) + 2)
    store = PagedKVStore(pages, geometry, params.high, params.low, max_seq_len=req.total_len,
                         window=0 if req.forced is not None else params.window, workers=workers)
    n = req.prompt_len
    with store, CompressionEngine(store, params, heads, workers) as eng:
        eng.prefill([PromptInput(req.request_id, req.queries[:, :, :n].astype(np.float64),
                                 req.keys[:, :n].astype(np.float64), req.values[:, :n].astype(np.float64),
                                 req.forced, req.scores)])
        states = eng.request_states(req.request_id)
        keep = [(len(s.high_pages), len(s.low_pages)) for s in states]
        growth = []
        for t in range(n, req.total_len):
            before = [(len(s.high_pages), len(s.low_pages)) for s in states]
            eng.decode({req.request_id: (req.queries[:, :, t].astype(np.float64), req.keys[:, t].astype(np.float64),
                                         req.values[:, t].astype(np.float64))})
            step = []
            for s, (h0, l0) in zip(states, before):
                if len(s.high_pages) > h0:
                    step.append(TokenClass.HIGH)
                elif len(s.low_pages) > l0:
                    step.append(TokenClass.LOW)
                else:
                    step.append(None)
            growth.append(step)
        bits = [accounting.head_bits(s) for s in states]
    wp = math.ceil(min(params.window, req.total_len) / window_tokens_per_page(geometry, params))
    return Trajectory(req.request_id, req.arrival, n, [geometry.pages_for(n, params.high)] * heads, keep, growth, wp,
                      sum(b.key_bits for b in bits), sum(b.value_bits for b in bits),
                      sum(b.baseline_bits for b in bits))


def baseline_geometry(geometry: PageGeometry) -> PageGeometry:
    return PageGeometry(geometry.page_bytes, geometry.head_dim, 0, 0, 0)


def baseline_trajectory(req: RequestTrace, heads: int, geometry: PageGeometry) -> Trajectory:
    g = baseline_geometry(geometry)
    n = req.prompt_len
    p0 = g.pages_for(n, FP16)
    growth = []
    for t in range(n, req.total_len):
        grew = g.pages_for(t + 1, FP16) > g.pages_for(t, FP16)
        growth.append([TokenClass.HIGH if grew else None] * heads)
    base = req.total_len * geometry.head_dim * 16 * heads
    return Trajectory(req.request_id, req.arrival, n, [p0] * heads, [(p0, 0)] * heads, growth, 0, base, base, base)


@dataclass
class ServingRun:
    batch_size: list[int] = field(default_factory=list)
    queue_length: list[int] = field(default_factory=list)
    held_pages: list[int] = field(default_factory=list)
    completed: int = 0
    ticks: int = 0
    pages_allocated: int = 0
    pages_freed: int = 0
    terminal_free: int = 0
    total_pages: int = 0

    @property
    def mean_active_batch(self) -> float:
        active = [b for b in self.batch_size if b > 0]
        return float(np.mean(active)) if active else 0.0

    @property
    def saturated_batch(self) -> float:
        """Mean batch size over ticks where requests were left waiting."""
        sat = [b for b, q in zip(self.batch_size, self.queue_length) if q > 0]
        return float(np.mean(sat)) if sat else self.mean_active_batch

    @property
    def peak_batch(self) -> int:
        return max(self.batch_size, default=0)


def serve(trajectories: list[Trajectory], total_pages: int, geometry: PageGeometry, high, low,
          max_ticks: int = 1_000_000) -> ServingRun:
    """Replay trajectories against a real store under FIFO admission."""
    if not trajectories:
        raise ConfigError("nothing to simulate")
    heads = trajectories[0].heads
    longest = max(max(sum(k) for k in t.prompt_keep) + t.steps for t in trajectories)
    table_len = max(max(t.prompt_reserve) for t in trajectories)
    table_len = max(table_len, longest, max(t.window_pages for t in trajectories), 1)
    for t in trajectories:
        if t.peak > total_pages:
            raise ConfigError(f"request {t.request_id} needs {t.peak} pages, pool has {total_pages}")
    store = PagedKVStore(total_pages, geometry, high, low, max_seq_len=1, table_len=table_len)
    queue = sorted(trajectories, key=lambda t: (t.arrival, t.request_id))
    waiting: list[Trajectory] = []
    running: dict[str, list] = {}  # id -> [trajectory, decode steps done]
    reserved = 0
    run = ServingRun(total_pages=total_pages)
    tick = 0
    while queue or waiting or running:
        if tick >= max_ticks:
            raise ConfigError(f"simulation exceeded {max_ticks} ticks")
        while queue and queue[0].arrival <= tick:
            waiting.append(queue.pop(0))
        # decode step for requests admitted earlier
        needs = []
        for rid, (t, k) in running.items():
            for h, g in enumerate(t.growth[k]):
                if g is not None:
                    needs.append((rid, h, g))
            running[rid][1] = k + 1
        if needs:
            store.generation_alloc(needs)
        # pages no running request still has a claim on
        spare = store.free_count - sum(t.steady - t.held[k] for t, k in running.values())
        admitted = []
        while waiting and reserved + waiting[0].steady <= total_pages and waiting[0].transient <= spare:
            t = waiting.pop(0)
            reserved += t.steady
            spare -= t.transient
            admitted.append(t)
        if admitted:
            store.conservative_alloc_prompt([(t.request_id, [t.prompt_len] * t.heads) for t in admitted])
            store.finalize_prompt([PromptTrim(t.request_id, h, hi, lo)
                                   for t in admitted for h, (hi, lo) in enumerate(t.prompt_keep)])
            window = [HeadPlan(t.request_id, heads + h, alloc_high=t.window_pages, configure=False)
                      for t in admitted for h in range(heads) if t.window_pages]
            if window:
                store.compact(window)
            for t in admitted:
                running[t.request_id] = [t, 0]
        run.batch_size.append(len(running))
        run.queue_length.append(len(waiting))
        run.held_pages.append(store.held_pages())
        for rid in [rid for rid, (t, k) in running.items() if k >= t.steps]:
            store.release_request(rid)
            reserved -= running[rid][0].steady
            del running[rid]
            run.completed += 1
        tick += 1
    run.ticks = tick
    run.pages_allocated = store.pages_allocated
    run.pages_freed = store.pages_freed
    run.terminal_free = store.free_count
    store.audit()
    return run


@dataclass
class SimulationResult:
    compressed: ServingRun
    baseline: ServingRun
    payload_fraction: Fraction
    reservation_fraction: float  # compressed steady reservation over the baseline's, same page size

    @property
    def capacity_ratio(self) -> float:
        b = self.baseline.saturated_batch
        return self.compressed.saturated_batch / b if b else float("inf")


def simulate(workload: Workload, params: PolicyParams, geometry: PageGeometry, total_pages: int,
             workers: int = 1, max_ticks: int = 1_000_000) -> SimulationResult:
    heads = workload.shape.heads
    comp = [compressed_trajectory(r, heads, params, geometry, workers) for r in workload.requests]
    base = [baseline_trajectory(r, heads, geometry) for r in workload.requests]
    bg = baseline_geometry(geometry)
    c_run = serve(comp, total_pages, geometry, params.high, params.low, max_ticks)
    b_run = serve(base, total_pages, bg, FP16, FP16, max_ticks)
    payload = Fraction(sum(t.key_bits + t.value_bits for t in comp), sum(2 * t.baseline_bits for t in comp))
    res_frac = sum(t.steady for t in comp) / sum(t.steady for t in base)
    return SimulationResult(c_run, b_run, payload, res_frac)
