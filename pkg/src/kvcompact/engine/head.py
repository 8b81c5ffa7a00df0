"""Compressed cache of a single KV head.

Tokens live in one of three places: the high section (pages configured for
the high precision pair), the low section (low-pair pages) or the recent
window (held outside the page pool). Sections never shrink: a token that
leaves a section hands its page slot to the token that displaced it, so
pages stay dense and page ``k`` of a section holds its section slots
``k * tokens_per_page ...``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..attention import SignificanceStats, update_significance_generation
from ..errors import InvalidInputError, InvalidStateError
from ..policy import GenerationDecision, PolicyParams, TokenClass, VictimAction, generation_step
from ..quant import PrecisionPair, QuantizedVector, dequantize, downgrade, quantize, to_half
from .attention import AttentionResult, Segment, attend, split_attention


def encode(vec: np.ndarray, bits: int):
    """Stored form of ``vec``: half-metadata quantization, or float16 values at 16 bits."""
    if bits == 16:
        return np.asarray(vec, dtype=np.float64).astype(np.float16).astype(np.float64)
    return to_half(quantize(vec, bits))


def reconstruct(enc) -> np.ndarray:
    if isinstance(enc, QuantizedVector):
        return dequantize(enc)
    return np.asarray(enc, dtype=np.float64)


def lower(enc, bits: int):
    """Re-encode a stored vector at ``bits``, starting from its reconstruction."""
    if isinstance(enc, QuantizedVector):
        if bits == enc.bits:
            return enc
        if bits < enc.bits:
            return to_half(downgrade(enc, bits))
    return encode(reconstruct(enc), bits)


@dataclass
class WindowToken:
    position: int
    key: object  # raw float64 vector, or an encoding when the window is held at the high pair
    value: object

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        return reconstruct(self.key), reconstruct(self.value)


@dataclass(frozen=True)
class StepPlan:
    """Planning result for one head and one step."""

    decision: GenerationDecision | None
    need: TokenClass | None  # section that needs a fresh page, if any


class HeadCacheState:
    def __init__(self, store, request: str, head: int, params: PolicyParams):
        if store.high != params.high or store.low != params.low:
            raise InvalidInputError("store and policy disagree on precision pairs")
        self.store = store
        self.request = request
        self.head = head
        self.params = params
        self.d = store.geometry.head_dim
        self.tph_high = store.geometry.tokens_per_page(params.high)
        self.tph_low = store.geometry.tokens_per_page(params.low)
        self.window: deque[WindowToken] = deque()
        self.stats = SignificanceStats()
        self.high: list[int] = []  # positions in section-slot order
        self.low: list[int] = []
        self.high_pages: list[int] = []
        self.low_pages: list[int] = []
        self.loc: dict[int, tuple[int, int]] = {}
        self.section_index: dict[int, tuple[TokenClass, int]] = {}
        self.pruned: list[int] = []
        self.produced = 0
        self.history: list[GenerationDecision] = []
        self.allocations: list[tuple[int, TokenClass, int]] = []  # (step, class, page) for replay checks

    @property
    def key(self) -> tuple[str, int]:
        return (self.request, self.head)

    # -- slot bookkeeping ------------------------------------------------

    def _pages(self, cls: TokenClass) -> list[int]:
        return self.high_pages if cls is TokenClass.HIGH else self.low_pages

    def _pair(self, cls: TokenClass) -> PrecisionPair:
        return self.params.high if cls is TokenClass.HIGH else self.params.low

    def _tph(self, cls: TokenClass) -> int:
        return self.tph_high if cls is TokenClass.HIGH else self.tph_low

    def _slot_of(self, cls: TokenClass, index: int) -> tuple[int, int]:
        tph = self._tph(cls)
        pages = self._pages(cls)
        if index // tph >= len(pages):
            raise InvalidStateError(f"section {cls.value} of head {self.key} has no page for slot {index}")
        return pages[index // tph], index % tph

    def _put(self, cls: TokenClass, index: int, position: int, k, v) -> None:
        pid, slot = self._slot_of(cls, index)
        sig = float(self.stats.significance([position])[0])
        self.store.page(pid).write(slot, position, k, v, sig)
        self.loc[position] = (pid, slot)
        self.section_index[position] = (cls, index)

    def _read(self, position: int):
        pid, slot = self.loc[position]
        return self.store.page(pid).read_slot(slot)

    def _section_full(self, cls: TokenClass) -> bool:
        size = len(self.high if cls is TokenClass.HIGH else self.low)
        return size >= len(self._pages(cls)) * self._tph(cls)

    # -- prompt ----------------------------------------------------------

    def load_prompt(self, keys: np.ndarray, values: np.ndarray, stats: SignificanceStats,
                    classes: list[TokenClass], in_window: np.ndarray) -> None:
        """Place prompt tokens after the store granted ``high_pages`` and ``low_pages``."""
        n = keys.shape[0]
        self.stats = stats
        for pos in range(n):
            if not self.stats.is_tracked(pos):
                self.stats.track(pos)
        hp, lp = self.params.high, self.params.low
        for pos in range(n):
            if in_window[pos]:
                self._push_window(pos, keys[pos], values[pos])
                continue
            cls = classes[pos]
            if cls is TokenClass.HIGH:
                self.high.append(pos)
                self._put(TokenClass.HIGH, len(self.high) - 1, pos,
                          encode(keys[pos], hp.key_bits), encode(values[pos], hp.value_bits))
            elif cls is TokenClass.LOW:
                self.low.append(pos)
                self._put(TokenClass.LOW, len(self.low) - 1, pos,
                          encode(keys[pos], lp.key_bits), encode(values[pos], lp.value_bits))
            else:
                self.pruned.append(pos)
                self.stats.untrack(pos)
        self.produced = n

    # -- generation ------------------------------------------------------

    def _push_window(self, pos: int, k, v) -> None:
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if self.params.window_at_high:
            hp = self.params.high
            self.window.append(WindowToken(pos, encode(k, hp.key_bits), encode(v, hp.value_bits)))
        else:
            self.window.append(WindowToken(pos, k.copy(), v.copy()))

    def push(self, key, value) -> int:
        """Append the new token to the window and start tracking it."""
        key = np.asarray(key, dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if key.shape != (self.d,) or value.shape != (self.d,):
            raise InvalidInputError(f"token vectors must have shape ({self.d},)")
        pos = self.produced
        self.stats.track(pos)
        self._push_window(pos, key, value)
        self.produced += 1
        return pos

    def plan(self) -> StepPlan:
        """Decide the fate of the token leaving the window, without mutating anything."""
        if len(self.window) <= self.params.window:
            return StepPlan(None, None)
        cand = self.window[0].position
        decision = generation_step(cand, self.stats, self.high, self.low, self.produced, self.params)
        need = None
        if decision.high_growth and self._section_full(TokenClass.HIGH):
            need = TokenClass.HIGH
        elif decision.low_growth and self._section_full(TokenClass.LOW):
            need = TokenClass.LOW
        return StepPlan(decision, need)

    def apply(self, plan: StepPlan, new_page: int | None = None) -> None:
        if plan.need is not None:
            if new_page is None:
                raise InvalidStateError(f"head {self.key} planned a page but none was granted")
            self._pages(plan.need).append(new_page)
            self.allocations.append((self.produced, plan.need, new_page))
        d = plan.decision
        if d is None:
            return
        tok = self.window.popleft()
        if tok.position != d.candidate:
            raise InvalidStateError("decision does not match the window head")
        k_raw, v_raw = tok.raw()
        hp, lp = self.params.high, self.params.low
        c = d.candidate
        hi_len, lo_len = len(self.high), len(self.low)

        if d.placement is TokenClass.HIGH:
            ck = tok.key if (self.params.window_at_high and hp.key_bits != 16) else encode(k_raw, hp.key_bits)
            cv = tok.value if (self.params.window_at_high and hp.value_bits != 16) else encode(v_raw, hp.value_bits)
            if d.victim_action is VictimAction.RETAIN:
                self._put(TokenClass.HIGH, hi_len, c, ck, cv)
            elif d.victim == c:
                if d.victim_action is VictimAction.DOWNGRADE:
                    self._put(TokenClass.LOW, lo_len, c, lower(ck, lp.key_bits), lower(cv, lp.value_bits))
                else:
                    self._drop(c)
            else:
                vk, vv = self._read(d.victim)
                _, idx = self.section_index.pop(d.victim)
                del self.loc[d.victim]
                self._put(TokenClass.HIGH, idx, c, ck, cv)
                if d.victim_action is VictimAction.DOWNGRADE:
                    self._put(TokenClass.LOW, lo_len, d.victim, lower(vk, lp.key_bits), lower(vv, lp.value_bits))
                else:
                    self._drop(d.victim)
        elif d.placement is TokenClass.LOW:
            ck, cv = encode(k_raw, lp.key_bits), encode(v_raw, lp.value_bits)
            if d.victim_action is VictimAction.RETAIN:
                self._put(TokenClass.LOW, lo_len, c, ck, cv)
            elif d.victim == c:
                self._drop(c)
            else:
                _, idx = self.section_index.pop(d.victim)
                del self.loc[d.victim]
                self._put(TokenClass.LOW, idx, c, ck, cv)
                self._drop(d.victim)
        else:
            self._drop(c)
        self._apply_membership(d)
        self.history.append(d)

    def _apply_membership(self, d: GenerationDecision) -> None:
        # keep section lists in slot order so list index == section slot
        c, v = d.candidate, d.victim
        if d.placement is TokenClass.HIGH:
            if d.victim_action is VictimAction.RETAIN:
                self.high.append(c)
            elif v != c:
                self.high[self.high.index(v)] = c
            if d.victim_action is VictimAction.DOWNGRADE:
                self.low.append(v)
        elif d.placement is TokenClass.LOW:
            if d.victim_action is VictimAction.RETAIN:
                self.low.append(c)
            elif v != c:
                self.low[self.low.index(v)] = c

    def _drop(self, position: int) -> None:
        self.pruned.append(position)
        self.stats.untrack(position)
        self.loc.pop(position, None)
        self.section_index.pop(position, None)

    # -- attention -------------------------------------------------------

    def segments(self) -> list[Segment]:
        """High pages, then low pages, then the window."""
        segs = []
        for label, pages in (("high", self.high_pages), ("low", self.low_pages)):
            for pid in pages:
                pos, k, v = self.store.page(pid).decode()
                segs.append(Segment(pos, k, v, f"{label}:{pid}"))
        if self.window:
            raws = [t.raw() for t in self.window]
            segs.append(Segment(np.array([t.position for t in self.window], dtype=np.int64),
                                np.stack([r[0] for r in raws]), np.stack([r[1] for r in raws]), "window"))
        return segs

    def attend(self, query) -> AttentionResult:
        return attend(query, self.segments())

    def attend_split(self, query) -> np.ndarray:
        return split_attention(query, self.segments())

    def observe(self, result: AttentionResult, exclude: int | None = None) -> None:
        """Fold one step's aggregated scores into the running significance."""
        pos = result.positions
        agg = result.aggregated
        if exclude is not None:
            keep = pos != exclude
            pos, agg = pos[keep], agg[keep]
        update_significance_generation(self.stats, agg, pos)

    def step(self, query, key, value, new_page: int | None = None) -> AttentionResult:
        """Single-head step that allocates its own page through the store."""
        pos = self.push(key, value)
        plan = self.plan()
        if plan.need is not None and new_page is None:
            new_page = self.store.generation_alloc([(self.request, self.head, plan.need)])[self.key]
        self.apply(plan, new_page)
        result = self.attend(query)
        self.observe(result, exclude=pos)
        return result

    # -- inspection ------------------------------------------------------

    def live_positions(self) -> np.ndarray:
        return np.sort(np.array(self.high + self.low + [t.position for t in self.window], dtype=np.int64))

    def class_of(self, position: int) -> str:
        if position in self.section_index:
            return self.section_index[position][0].value
        if any(t.position == position for t in self.window):
            return "window"
        if position in self.pruned:
            return "pruned"
        raise InvalidInputError(f"position {position} was never produced")

    def counts(self) -> dict[str, int]:
        return {"high": len(self.high), "low": len(self.low), "window": len(self.window),
                "pruned": len(self.pruned)}

    def check(self) -> None:
        """Assert the cache invariants; used by tests and debug runs."""
        c = self.counts()
        if sum(c.values()) != self.produced:
            raise AssertionError(f"conservation broken at {self.key}: {c} vs {self.produced}")
        entry = self.store.entry(self.request, self.head)
        if entry.high_pages() != self.high_pages or entry.low_pages() != self.low_pages:
            raise AssertionError(f"page lists of {self.key} disagree with the table")
        for cls, members in ((TokenClass.HIGH, self.high), (TokenClass.LOW, self.low)):
            if len(members) > len(self._pages(cls)) * self._tph(cls):
                raise AssertionError("section overflows its pages")
            for i, pos in enumerate(members):
                pid, slot = self._slot_of(cls, i)
                if self.loc[pos] != (pid, slot) or self.store.page(pid).positions[slot] != pos:
                    raise AssertionError(f"token {pos} misplaced in {cls.value} section")
        stored = set()
        for pid in self.high_pages + self.low_pages:
            p, _, _ = self.store.page(pid).decode()
            stored.update(p.tolist())
        window = {t.position for t in self.window}
        if stored | window != set(self.live_positions().tolist()):
            raise AssertionError("live positions disagree with page position segments")
