"""Per-vector asymmetric min/max quantization of key and value vectors."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

VALID_BITS = (1, 2, 4, 8, 16)
SCALE_FLOOR = 1e-12
METADATA_BITS = 16  # scale and zero point are each stored as IEEE half


def check_bits(bits: int) -> int:
    if bits not in VALID_BITS:
        raise InvalidInputError(f"unsupported precision {bits}; expected one of {VALID_BITS}")
    return bits


@dataclass(frozen=True)
class PrecisionPair:
    key_bits: int
    value_bits: int

    def __post_init__(self):
        check_bits(self.key_bits)
        check_bits(self.value_bits)

    @property
    def mirror(self) -> bool:
        """Values kept at higher precision than keys (the K4V8-style comparisons)."""
        return self.key_bits < self.value_bits

    @property
    def total_bits(self) -> int:
        return self.key_bits + self.value_bits

    @property
    def name(self) -> str:
        return f"K{self.key_bits}V{self.value_bits}"

    @classmethod
    def parse(cls, text: str) -> "PrecisionPair":
        m = re.fullmatch(r"\s*[Kk](\d+)[Vv](\d+)\s*", text)
        if not m:
            raise InvalidInputError(f"cannot parse precision pair {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return self.name


K8V4 = PrecisionPair(8, 4)
K4V2 = PrecisionPair(4, 2)
FP16 = PrecisionPair(16, 16)


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    codes: np.ndarray
    scale: float
    zero: float
    bits: int

    @property
    def dim(self) -> int:
        return int(self.codes.size)

    def payload_bits(self) -> int:
        return self.dim * self.bits + 2 * METADATA_BITS

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return (self.bits == other.bits and self.scale == other.scale and self.zero == other.zero
                and np.array_equal(self.codes, other.codes))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(vec, bits: int) -> QuantizedVector:
    check_bits(bits)
    if bits >= 16:
        raise InvalidInputError("16-bit storage is a passthrough, not a quantization")
    x = np.asarray(vec, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError("cannot quantize an empty vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("cannot quantize non-finite values")
    lo = float(x.min())
    hi = float(x.max())
    levels = (1 << bits) - 1
    scale = max((hi - lo) / levels, SCALE_FLOOR)
    codes = np.clip(_round_half_away((x - lo) / scale), 0, levels)
    dtype = np.uint8 if bits <= 8 else np.uint16
    return QuantizedVector(codes=codes.astype(dtype), scale=scale, zero=lo, bits=bits)


def dequantize(q: QuantizedVector) -> np.ndarray:
    return q.scale * q.codes.astype(np.float64) + q.zero


def downgrade(q: QuantizedVector, lower: int) -> QuantizedVector:
    """Re-quantize the reconstruction of ``q`` at fewer bits."""
    check_bits(lower)
    if lower >= q.bits:
        raise InvalidInputError(f"downgrade target {lower} is not below current {q.bits} bits")
    return quantize(dequantize(q), lower)


def to_half(q: QuantizedVector) -> QuantizedVector:
    """Round scale and zero point to float16 (round-to-nearest-even), as stored in pages."""
    with np.errstate(over="ignore"):
        scale = float(np.float16(q.scale))
        zero = float(np.float16(q.zero))
    if not (np.isfinite(scale) and np.isfinite(zero)):
        raise InvalidInputError("quantization metadata overflows float16")
    return QuantizedVector(codes=q.codes, scale=scale, zero=zero, bits=q.bits)


def pack_codes(codes, bits: int) -> bytes:
    """Bit-pack codes little-endian within each byte; code 0 sits in the lowest bits."""
    check_bits(bits)
    c = np.asarray(codes).ravel()
    if bits == 16:
        return c.astype("<u2").tobytes()
    if bits == 8:
        return c.astype(np.uint8).tobytes()
    per_byte = 8 // bits
    pad = (-c.size) % per_byte
    c = np.concatenate([c.astype(np.uint8), np.zeros(pad, dtype=np.uint8)]).reshape(-1, per_byte)
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    packed = np.bitwise_or.reduce(c << shifts, axis=1).astype(np.uint8)
    return packed.tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    check_bits(bits)
    if bits == 16:
        return np.frombuffer(data, dtype="<u2", count=count).astype(np.uint16)
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw[:count].copy()
    per_byte = 8 // bits
    mask = (1 << bits) - 1
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    out = (raw[:, None] >> shifts) & mask
    return out.ravel()[:count].astype(np.uint8)
