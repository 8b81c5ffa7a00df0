"""Tiled in-page layouts for quantized keys and values.

Keys are laid out as ``[F / (K_vec*K_group), N_tokens, K_group, K_vec]`` so a
thread group reading ``K_vec``-wide chunks along the feature axis touches
contiguous memory. Values use ``[F / V_group, N_tokens / V_vec, V_group, V_vec]``,
vectorizing along the token axis instead. A token count that is not a
multiple of ``V_vec`` is padded with zero slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class LayoutParams:
    features: int
    n_tokens: int
    k_vec: int = 1
    k_group: int = 1
    v_vec: int = 1
    v_group: int = 1

    def __post_init__(self):
        if min(self.features, self.n_tokens, self.k_vec, self.k_group, self.v_vec, self.v_group) <= 0:
            raise InvalidInputError("layout parameters must be positive")
        if self.features % (self.k_vec * self.k_group):
            raise InvalidInputError(
                f"F={self.features} not divisible by K_vec*K_group={self.k_vec * self.k_group}")
        if self.features % self.v_group:
            raise InvalidInputError(f"F={self.features} not divisible by V_group={self.v_group}")

    @property
    def padded_tokens(self) -> int:
        return math.ceil(self.n_tokens / self.v_vec) * self.v_vec

    @classmethod
    def for_page(cls, features: int, n_tokens: int, preferred: int = 4) -> "LayoutParams":
        """Largest power-of-two factors up to ``preferred`` that need no padding."""
        def pick(limit_ok):
            f = preferred
            while f > 1 and not limit_ok(f):
                f //= 2
            return f
        k_vec = pick(lambda f: features % f == 0)
        k_group = pick(lambda f: features % (k_vec * f) == 0)
        v_group = pick(lambda f: features % f == 0)
        v_vec = pick(lambda f: n_tokens % f == 0)
        return cls(features, n_tokens, k_vec, k_group, v_vec, v_group)


def _check(x: np.ndarray, p: LayoutParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (p.n_tokens, p.features):
        raise InvalidInputError(f"expected ({p.n_tokens}, {p.features}), got {x.shape}")
    return x


def key_index(t: int, f: int, p: LayoutParams) -> int:
    chunk = p.k_vec * p.k_group
    return (((f // chunk) * p.n_tokens + t) * p.k_group + (f // p.k_vec) % p.k_group) * p.k_vec + f % p.k_vec


def value_index(t: int, f: int, p: LayoutParams) -> int:
    blocks = p.padded_tokens // p.v_vec
    return (((f // p.v_group) * blocks + t // p.v_vec) * p.v_group + f % p.v_group) * p.v_vec + t % p.v_vec


def pack_keys(keys, p: LayoutParams) -> np.ndarray:
    x = _check(keys, p)
    n, f = x.shape
    tiled = x.reshape(n, f // (p.k_vec * p.k_group), p.k_group, p.k_vec).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(tiled).ravel()


def unpack_keys(flat, p: LayoutParams) -> np.ndarray:
    buf = np.asarray(flat)
    c = p.features // (p.k_vec * p.k_group)
    if buf.size != c * p.n_tokens * p.k_group * p.k_vec:
        raise InvalidInputError("key buffer has the wrong size")
    tiled = buf.reshape(c, p.n_tokens, p.k_group, p.k_vec).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(tiled).reshape(p.n_tokens, p.features)


def pack_values(values, p: LayoutParams) -> np.ndarray:
    x = _check(values, p)
    n, f = x.shape
    if p.padded_tokens != n:
        x = np.concatenate([x, np.zeros((p.padded_tokens - n, f), dtype=x.dtype)])
    tiled = x.reshape(p.padded_tokens // p.v_vec, p.v_vec, f // p.v_group, p.v_group).transpose(2, 0, 3, 1)
    return np.ascontiguousarray(tiled).ravel()


def unpack_values(flat, p: LayoutParams) -> np.ndarray:
    buf = np.asarray(flat)
    blocks = p.padded_tokens // p.v_vec
    if buf.size != p.padded_tokens * p.features:
        raise InvalidInputError("value buffer has the wrong size")
    tiled = buf.reshape(p.features // p.v_group, blocks, p.v_group, p.v_vec).transpose(1, 3, 0, 2)
    return np.ascontiguousarray(tiled).reshape(p.padded_tokens, p.features)[: p.n_tokens]
