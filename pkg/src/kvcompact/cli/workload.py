"""Seeded synthetic attention workloads.

Each (layer, KV head) gets a Zipf exponent ``s``. For every request a random
rank permutation plants heavy hitters: key ``j`` has first coordinate
``-s * ln(rank_j)`` and standard-normal elsewhere, and queries are
``[sqrt(d), s * noise]``. The logit of query ``i`` on key ``j`` is then
``-s * ln(rank_j)`` plus a small perturbation, so causal attention weights
fall off as ``rank^-s``. At ``s = 0`` every logit is exactly zero and
attention is uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..policy import TokenClass

QUERY_NOISE = 0.25


@dataclass
class WorkloadShape:
    layers: int = 2
    kv_heads: int = 2
    queries_per_kv: int = 2
    head_dim: int = 64

    @property
    def heads(self) -> int:
        return self.layers * self.kv_heads

    def __post_init__(self):
        if min(self.layers, self.kv_heads, self.queries_per_kv, self.head_dim) < 1:
            raise ConfigError("model shape entries must be positive")


@dataclass
class RequestTrace:
    request_id: str
    arrival: int
    prompt_len: int
    queries: np.ndarray  # (heads, g, T, d)
    keys: np.ndarray  # (heads, T, d)
    values: np.ndarray  # (heads, T, d)
    forced: list[list[TokenClass]] | None = None  # per head, prompt tokens only
    scores: np.ndarray | None = None  # (heads, N, N) precomputed aggregated prompt scores

    @property
    def total_len(self) -> int:
        return int(self.keys.shape[1])

    @property
    def gen_len(self) -> int:
        return self.total_len - self.prompt_len


@dataclass
class Workload:
    shape: WorkloadShape
    seed: int
    zipf: np.ndarray  # (layers, kv_heads)
    requests: list[RequestTrace] = field(default_factory=list)


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def zipf_exponents(seed: int, shape: WorkloadShape, lo: float, hi: float) -> np.ndarray:
    if lo < 0 or hi < lo:
        raise ConfigError(f"invalid Zipf exponent range [{lo}, {hi}]")
    return _rng(seed, 0).uniform(lo, hi, size=(shape.layers, shape.kv_heads))


def head_tokens(rng: np.random.Generator, length: int, s: float, g: int, d: int):
    """Queries ``(g, T, d)``, keys and values ``(T, d)`` for one head, as float32."""
    ranks = rng.permutation(length) + 1
    keys = rng.standard_normal((length, d))
    keys[:, 0] = -s * np.log(ranks)
    values = rng.standard_normal((length, d))
    queries = np.empty((g, length, d))
    queries[:, :, 0] = math.sqrt(d)
    queries[:, :, 1:] = s * QUERY_NOISE * rng.standard_normal((g, length, d - 1))
    return queries.astype(np.float32), keys.astype(np.float32), values.astype(np.float32)


def poisson_arrivals(seed: int, count: int, rate: float) -> list[int]:
    """Arrival ticks of a Poisson process with ``rate`` requests per tick."""
    if rate <= 0:
        raise ConfigError("arrival rate must be positive")
    gaps = _rng(seed, 1).exponential(1.0 / rate, size=count)
    times = np.cumsum(gaps) - gaps[0]
    return [int(math.floor(t)) for t in times]


def generate(seed: int, shape: WorkloadShape, num_requests: int, prompt_len: tuple[int, int],
             gen_len: tuple[int, int], rate: float = 1.0, zipf: tuple[float, float] = (0.5, 2.0)) -> Workload:
    if num_requests < 1:
        raise ConfigError("num_requests must be positive")
    (pmin, pmax), (gmin, gmax) = prompt_len, gen_len
    if not (1 <= pmin <= pmax and 0 <= gmin <= gmax):
        raise ConfigError("invalid length ranges")
    exps = zipf_exponents(seed, shape, *zipf)
    arrivals = poisson_arrivals(seed, num_requests, rate)
    lens = _rng(seed, 2)
    wl = Workload(shape, seed, exps)
    for r in range(num_requests):
        n = int(lens.integers(pmin, pmax + 1))
        t = n + int(lens.integers(gmin, gmax + 1))
        qs, ks, vs = [], [], []
        for layer in range(shape.layers):
            for h in range(shape.kv_heads):
                q, k, v = head_tokens(_rng(seed, 3, r, layer, h), t, float(exps[layer, h]),
                                      shape.queries_per_kv, shape.head_dim)
                qs.append(q)
                ks.append(k)
                vs.append(v)
        wl.requests.append(RequestTrace(f"r{r}", arrivals[r], n, np.stack(qs), np.stack(ks), np.stack(vs)))
    return wl


EXAMPLE_CLASSES = (
    (TokenClass.HIGH, TokenClass.LOW, TokenClass.LOW, TokenClass.LOW, TokenClass.PRUNED),
    (TokenClass.HIGH, TokenClass.HIGH, TokenClass.LOW, TokenClass.LOW, TokenClass.PRUNED),
)


def example_workload(seed: int = 0, head_dim: int = 64) -> Workload:
    """One 5-token request on two heads with fixed classes (1/3/1 and 2/2/1 high/low/pruned)."""
    shape = WorkloadShape(layers=1, kv_heads=2, queries_per_kv=1, head_dim=head_dim)
    rng = _rng(seed, 9)
    q = rng.standard_normal((2, 1, 5, head_dim)).astype(np.float32)
    k = rng.standard_normal((2, 5, head_dim)).astype(np.float32)
    v = rng.standard_normal((2, 5, head_dim)).astype(np.float32)
    req = RequestTrace("example", 0, 5, q, k, v, forced=[list(c) for c in EXAMPLE_CLASSES])
    return Workload(shape, seed, np.zeros((1, 2)), [req])
