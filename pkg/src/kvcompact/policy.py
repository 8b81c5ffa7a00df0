"""Three-level token classification: keep at high precision, keep at low precision, or prune."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attention import SignificanceStats
from .errors import InvalidInputError, InvalidStateError
from .quant import K4V2, K8V4, PrecisionPair

# Comparison used for the High test. The prompt rule is strict ("exceeds"),
# the per-step rule is inclusive ("at least").
PROMPT_HIGH_STRICT = True
GENERATION_HIGH_STRICT = False

DEFAULT_WINDOW = 64


class TokenClass(enum.Enum):
    HIGH = "high"
    LOW = "low"
    PRUNED = "pruned"


class VictimAction(enum.Enum):
    RETAIN = "retain"
    DOWNGRADE = "downgrade"
    PRUNE = "prune"


@dataclass(frozen=True)
class PolicyParams:
    alpha_h: float = 1.0
    alpha_l: float = 0.02
    window: int = DEFAULT_WINDOW
    high: PrecisionPair = K8V4
    low: PrecisionPair = K4V2
    low_precision_enabled: bool = True
    # "position": compare prompt token i against alpha / i.
    # "received": compare against alpha / (N - i), the number of scores it received.
    prompt_denominator: str = "position"
    # Store recent-window tokens quantized at the high pair instead of full precision.
    window_at_high: bool = False

    def __post_init__(self):
        if not (self.alpha_h >= 0 and self.alpha_l >= 0):
            raise InvalidInputError("thresholds must be non-negative")
        if self.alpha_l > self.alpha_h:
            raise InvalidInputError(f"alpha_l={self.alpha_l} exceeds alpha_h={self.alpha_h}")
        if self.window < 1:
            raise InvalidInputError("window must be a positive integer")
        if self.prompt_denominator not in ("position", "received"):
            raise InvalidInputError(f"unknown prompt_denominator {self.prompt_denominator!r}")

    def with_thresholds(self, alpha_h: float, alpha_l: float) -> "PolicyParams":
        return replace(self, alpha_h=alpha_h, alpha_l=alpha_l)


PRESETS: dict[str, PolicyParams] = {
    "llama3-8b": PolicyParams(alpha_h=1.0, alpha_l=0.02),
    "llama3-70b": PolicyParams(alpha_h=1.0, alpha_l=0.0),
    "qwen2.5-32b": PolicyParams(alpha_h=3.0, alpha_l=0.0),
    "qwq-32b": PolicyParams(alpha_h=3.0, alpha_l=0.0),
    # No high threshold was reported for this model; with the low tier off only alpha_l matters.
    "qwen2.5-7b": PolicyParams(alpha_h=1.0, alpha_l=0.04, low_precision_enabled=False),
}


def _sig_array(significance, n: int) -> np.ndarray:
    if isinstance(significance, SignificanceStats):
        sig = np.full(n, np.nan)
        tracked = significance.positions()
        tracked = tracked[tracked < n]
        sig[tracked] = significance.significance(tracked)
        return sig
    sig = np.asarray(significance, dtype=np.float64)
    if sig.shape != (n,):
        raise InvalidInputError(f"expected {n} significance values, got shape {sig.shape}")
    return sig


def classify_prompt(significance, n: int, params: PolicyParams) -> list[TokenClass]:
    """Classify every prompt token.

    The newest ``params.window`` tokens are always High. Token at 1-based
    position ``i`` is High when its significance exceeds ``alpha_h / i``, Low
    inside ``[alpha_l / i, alpha_h / i]`` and Pruned below. A token with no
    received scores yet (NaN) is kept High.
    """
    if n <= 0:
        raise InvalidInputError("prompt length must be positive")
    sig = _sig_array(significance, n)
    idx = np.arange(1, n + 1, dtype=np.float64)
    denom = idx if params.prompt_denominator == "position" else np.maximum(n - idx, 1.0)
    hi = params.alpha_h / denom
    lo = params.alpha_l / denom
    window_start = n - params.window  # 1-based positions > n - W are protected

    out: list[TokenClass] = []
    for k in range(n):
        s = sig[k]
        if k + 1 > window_start or math.isnan(s):
            out.append(TokenClass.HIGH)
        elif not params.low_precision_enabled:
            out.append(TokenClass.HIGH if s >= lo[k] else TokenClass.PRUNED)
        elif (s > hi[k]) if PROMPT_HIGH_STRICT else (s >= hi[k]):
            out.append(TokenClass.HIGH)
        elif s >= lo[k]:
            out.append(TokenClass.LOW)
        else:
            out.append(TokenClass.PRUNED)
    return out


def _victim_index(pos: np.ndarray, sig: np.ndarray) -> int:
    # lexsort orders NaN after every number, the same as treating it as +inf
    return int(np.lexsort((pos, sig))[0])


def select_victim(positions: Sequence[int], significance: Sequence[float]) -> int | None:
    """Position of the least significant token; ties go to the oldest position.

    Returns None for an empty section. NaN significance never wins.
    """
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size == 0:
        return None
    sig = np.asarray(significance, dtype=np.float64)
    if sig.shape != pos.shape:
        raise InvalidInputError("positions and significance are not aligned")
    return int(pos[_victim_index(pos, sig)])


@dataclass(frozen=True)
class GenerationDecision:
    candidate: int
    placement: TokenClass
    victim: int | None = None
    victim_action: VictimAction | None = None

    @property
    def pruned(self) -> list[int]:
        out = []
        if self.placement is TokenClass.PRUNED:
            out.append(self.candidate)
        if self.victim_action is VictimAction.PRUNE:
            out.append(self.victim)
        return out

    @property
    def high_growth(self) -> int:
        """Net change in the high section size (0 or 1)."""
        if self.placement is not TokenClass.HIGH:
            return 0
        return 1 if self.victim_action is VictimAction.RETAIN else 0

    @property
    def low_growth(self) -> int:
        """Net change in the low section size (0 or 1)."""
        if self.placement is TokenClass.HIGH:
            return 1 if self.victim_action is VictimAction.DOWNGRADE else 0
        if self.placement is TokenClass.LOW:
            return 1 if self.victim_action is VictimAction.RETAIN else 0
        return 0


def _thresholds(n: int, params: PolicyParams) -> tuple[float, float]:
    hi = params.alpha_h / n
    lo = params.alpha_l / n
    if not params.low_precision_enabled:
        hi = lo
    return hi, lo


def generation_step(candidate: int, stats: SignificanceStats, high: Sequence[int], low: Sequence[int],
                    n: int, params: PolicyParams) -> GenerationDecision:
    """Decide where the token leaving the recent window goes, and what happens to the victim.

    ``high`` and ``low`` are the positions currently in each section (without
    the candidate). The victim is chosen after the candidate is inserted, so
    the candidate can be its own victim. Nothing is mutated.
    """
    if n < 1:
        raise InvalidInputError("sequence length must be at least 1")
    if not stats.is_tracked(candidate):
        raise InvalidStateError(f"candidate {candidate} has no significance stats")
    hi, lo = _thresholds(n, params)
    s = stats.value(candidate)
    if math.isnan(s):
        s = math.inf

    high_hit = s > hi if GENERATION_HIGH_STRICT else s >= hi
    if high_hit or s >= lo:
        members = high if high_hit else low
        section = np.fromiter(itertools.chain(members, (candidate,)), dtype=np.int64, count=len(members) + 1)
        sig = stats.significance(section)
        k = _victim_index(section, sig)
        victim, sv = int(section[k]), float(sig[k])
        if sv < lo:
            action = VictimAction.PRUNE
        elif high_hit and sv < hi:
            action = VictimAction.DOWNGRADE
        else:
            action = VictimAction.RETAIN
        return GenerationDecision(candidate, TokenClass.HIGH if high_hit else TokenClass.LOW, victim, action)
    return GenerationDecision(candidate, TokenClass.PRUNED)


def apply_decision(decision: GenerationDecision, high: list[int], low: list[int]) -> None:
    """Mutate section membership lists according to ``decision``."""
    c = decision.candidate
    if decision.placement is TokenClass.HIGH:
        high.append(c)
        if decision.victim_action is VictimAction.DOWNGRADE:
            high.remove(decision.victim)
            low.append(decision.victim)
        elif decision.victim_action is VictimAction.PRUNE:
            high.remove(decision.victim)
    elif decision.placement is TokenClass.LOW:
        low.append(c)
        if decision.victim_action is VictimAction.PRUNE:
            low.remove(decision.victim)
