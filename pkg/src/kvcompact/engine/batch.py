"""Drive many heads of many requests through prefill and decode steps.

Each step runs in three phases: per-head planning (parallel), one
coordinated allocation through the store, then per-head application and
attention (parallel). Heads share nothing but the store, and the store hands
out pages in a fixed order, so results do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..attention import aggregate_gqa, causal_scores, prompt_significance
from ..errors import InvalidInputError, InvalidStateError
from ..memstore import PagedKVStore, PromptTrim
from ..policy import PolicyParams, TokenClass, classify_prompt
from .head import HeadCacheState


@dataclass
class PromptInput:
    request: str
    queries: np.ndarray  # (heads, g, N, d)
    keys: np.ndarray  # (heads, N, d)
    values: np.ndarray  # (heads, N, d)
    forced: Sequence[Sequence[TokenClass]] | None = None  # per head; bypasses the window when given
    scores: np.ndarray | None = None  # (heads, N, N) aggregated scores overriding the computed ones


@dataclass
class _PromptPlan:
    outputs: np.ndarray
    stats: object
    classes: list
    in_window: np.ndarray
    high: int
    low: int


class CompressionEngine:
    def __init__(self, store: PagedKVStore, params: PolicyParams, heads: int, workers: int = 1):
        if heads < 1:
            raise InvalidInputError("need at least one head per request")
        self.store = store
        self.params = params
        self.heads = heads
        self.workers = max(1, workers)
        self.states: dict[tuple[str, int], HeadCacheState] = {}
        self._pool: ThreadPoolExecutor | None = None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, items):
        items = list(items)
        if self.workers <= 1 or len(items) < 2:
            return [fn(x) for x in items]
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        return list(self._pool.map(fn, items))

    def request_states(self, request: str) -> list[HeadCacheState]:
        return [self.states[(request, h)] for h in range(self.heads)]

    def requests(self) -> list[str]:
        seen = []
        for req, _ in self.states:
            if req not in seen:
                seen.append(req)
        return seen

    # -- prompt ----------------------------------------------------------

    def _plan_prompt(self, q: np.ndarray, k: np.ndarray, v: np.ndarray, forced, scores=None) -> _PromptPlan:
        n = k.shape[0]
        per_query = [causal_scores(q[g], k) for g in range(q.shape[0])]
        outputs = np.stack([s @ v for s in per_query])
        if scores is not None and np.shape(scores) != (n, n):
            raise InvalidInputError(f"precomputed scores must be {n}x{n}")
        stats = prompt_significance(aggregate_gqa(per_query) if scores is None else scores)
        if forced is not None:
            classes = list(forced)
            if len(classes) != n:
                raise InvalidInputError(f"forced classes cover {len(classes)} of {n} tokens")
            in_window = np.zeros(n, dtype=bool)
        else:
            classes = classify_prompt(stats, n, self.params)
            in_window = np.arange(n) >= n - self.params.window
        high = sum(1 for c, w in zip(classes, in_window) if c is TokenClass.HIGH and not w)
        low = sum(1 for c, w in zip(classes, in_window) if c is TokenClass.LOW and not w)
        g = self.store.geometry
        return _PromptPlan(outputs, stats, classes, in_window, g.pages_for(high, self.params.high),
                           g.pages_for(low, self.params.low))

    def prefill(self, prompts: Sequence[PromptInput]) -> dict[str, np.ndarray]:
        """Process whole prompts; returns reference outputs of shape ``(heads, g, N, d)`` per request."""
        work = []
        for p in prompts:
            if p.keys.shape[0] != self.heads or p.queries.shape[0] != self.heads:
                raise InvalidInputError(f"request {p.request} does not have {self.heads} heads")
            if any((p.request, h) in self.states for h in range(self.heads)):
                raise InvalidStateError(f"request {p.request} was already prefilled")
            for h in range(self.heads):
                forced = None if p.forced is None else p.forced[h]
                work.append((p, h, forced))

        def plan(w):
            p, h, forced = w
            scores = None if p.scores is None else p.scores[h]
            return self._plan_prompt(p.queries[h], p.keys[h], p.values[h], forced, scores)

        plans = self._map(plan, work)
        self.store.conservative_alloc_prompt([(p.request, [p.keys.shape[1]] * self.heads) for p in prompts])
        trims = [PromptTrim(w[0].request, w[1], pl.high, pl.low) for w, pl in zip(work, plans)]
        self.store.finalize_prompt(trims)

        def load(item):
            (p, h, _), pl = item
            st = HeadCacheState(self.store, p.request, h, self.params)
            entry = self.store.entry(p.request, h)
            st.high_pages = entry.high_pages()
            st.low_pages = entry.low_pages()
            st.load_prompt(p.keys[h], p.values[h], pl.stats, pl.classes, pl.in_window)
            return st

        for st in self._map(load, zip(work, plans)):
            self.states[st.key] = st
        out: dict[str, list] = {}
        for (p, h, _), pl in zip(work, plans):
            out.setdefault(p.request, []).append(pl.outputs)
        return {r: np.stack(v) for r, v in out.items()}

    # -- decode ----------------------------------------------------------

    def decode(self, tokens: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]) -> dict[str, np.ndarray]:
        """One generation step for each listed request.

        ``tokens[request] = (queries (heads, g, d), keys (heads, d), values (heads, d))``.
        Returns attention outputs ``(heads, g, d)`` per request.
        """
        items = []
        for req, (q, k, v) in tokens.items():
            for h in range(self.heads):
                if (req, h) not in self.states:
                    raise InvalidStateError(f"request {req} has not been prefilled")
                items.append((self.states[(req, h)], q[h], k[h], v[h]))

        def plan(item):
            st, _, k, v = item
            pos = st.push(k, v)
            return pos, st.plan()

        planned = self._map(plan, items)
        needs = [(st.request, st.head, pl.need) for (st, *_), (_, pl) in zip(items, planned) if pl.need is not None]
        grants = self.store.generation_alloc(needs) if needs else {}

        def finish(k):
            st, q, _, _ = items[k]
            pos, pl = planned[k]
            st.apply(pl, grants.get(st.key))
            res = st.attend(q)
            st.observe(res, exclude=pos)
            return res.output

        outputs = self._map(finish, range(len(items)))
        out: dict[str, list] = {}
        for (st, *_), o in zip(items, outputs):
            out.setdefault(st.request, []).append(o)
        return {r: np.stack(v) for r, v in out.items()}

    def release(self, request: str) -> list[int]:
        freed = self.store.release_request(request)
        for h in range(self.heads):
            self.states.pop((request, h), None)
        return freed
