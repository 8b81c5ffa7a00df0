from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError, InvalidStateError
from ..layout import LayoutParams, pack_keys, pack_values, unpack_keys, unpack_values
from ..quant import PrecisionPair, QuantizedVector, pack_codes, to_half, unpack_codes
from .geometry import PageGeometry


def _code_dtype(bits: int):
    return np.uint16 if bits == 16 else np.uint8


class UnifiedPage:
    """A fixed-size page configured for one precision pair.

    Holds the six per-token segments: key codes, key scale/zero, value codes,
    value scale/zero, significance score and token position. Scale and zero
    point are stored as float16. A 16-bit side stores the raw float16 bits
    and leaves its metadata at zero.
    """

    def __init__(self, page_id: int, geometry: PageGeometry):
        self.page_id = page_id
        self.geometry = geometry
        self.pair: PrecisionPair | None = None
        self.capacity = 0
        self.occupancy = 0
        self._decoded = None

    def configure(self, pair: PrecisionPair) -> None:
        if self.pair is not None:
            raise InvalidStateError(f"page {self.page_id} already configured as {self.pair}")
        d = self.geometry.head_dim
        cap = self.geometry.tokens_per_page(pair)
        self.pair = pair
        self.capacity = cap
        self.occupancy = 0
        self.key_codes = np.zeros((cap, d), dtype=_code_dtype(pair.key_bits))
        self.value_codes = np.zeros((cap, d), dtype=_code_dtype(pair.value_bits))
        self.key_meta = np.zeros((cap, 2), dtype=np.float16)
        self.value_meta = np.zeros((cap, 2), dtype=np.float16)
        self.scores = np.zeros(cap, dtype=np.float32)
        self.positions = np.full(cap, -1, dtype=np.int32)
        self._decoded = None

    def reset(self) -> None:
        self.pair = None
        self.capacity = 0
        self.occupancy = 0
        self._decoded = None
        for name in ("key_codes", "value_codes", "key_meta", "value_meta", "scores", "positions"):
            self.__dict__.pop(name, None)

    @property
    def configured(self) -> bool:
        return self.pair is not None

    @property
    def full(self) -> bool:
        return self.occupancy >= self.capacity

    def _store(self, codes: np.ndarray, meta: np.ndarray, slot: int, vec, bits: int) -> None:
        if bits == 16:
            raw = np.asarray(vec, dtype=np.float64)
            if raw.shape != (self.geometry.head_dim,):
                raise InvalidInputError("vector has the wrong dimension")
            codes[slot] = raw.astype(np.float16).view(np.uint16)
            meta[slot] = 0
            return
        if not isinstance(vec, QuantizedVector) or vec.bits != bits:
            raise InvalidInputError(f"page expects a {bits}-bit quantized vector")
        if vec.dim != self.geometry.head_dim:
            raise InvalidInputError("vector has the wrong dimension")
        half = to_half(vec)
        codes[slot] = half.codes
        meta[slot] = (half.scale, half.zero)

    def write(self, slot: int, position: int, key, value, score: float = 0.0) -> None:
        """Write one token into ``slot`` (must be < occupancy, or == occupancy to append)."""
        if self.pair is None:
            raise InvalidStateError(f"page {self.page_id} is not configured")
        if not 0 <= slot <= self.occupancy or slot >= self.capacity:
            raise InvalidInputError(f"slot {slot} invalid for occupancy {self.occupancy}/{self.capacity}")
        self._store(self.key_codes, self.key_meta, slot, key, self.pair.key_bits)
        self._store(self.value_codes, self.value_meta, slot, value, self.pair.value_bits)
        self.scores[slot] = score
        self.positions[slot] = position
        if slot == self.occupancy:
            self.occupancy += 1
        self._decoded = None

    def append(self, position: int, key, value, score: float = 0.0) -> int:
        slot = self.occupancy
        self.write(slot, position, key, value, score)
        return slot

    def read_quantized(self, slot: int) -> tuple[QuantizedVector, QuantizedVector]:
        """The stored key and value of ``slot`` with their half-precision metadata."""
        if not 0 <= slot < self.occupancy:
            raise InvalidInputError(f"slot {slot} is empty")
        if 16 in (self.pair.key_bits, self.pair.value_bits):
            raise InvalidStateError("16-bit slots are not quantized")
        k = QuantizedVector(self.key_codes[slot].copy(), float(self.key_meta[slot, 0]),
                            float(self.key_meta[slot, 1]), self.pair.key_bits)
        v = QuantizedVector(self.value_codes[slot].copy(), float(self.value_meta[slot, 0]),
                            float(self.value_meta[slot, 1]), self.pair.value_bits)
        return k, v

    def read_slot(self, slot: int):
        """Stored (key, value) of ``slot``; a 16-bit side comes back as float64 values."""
        if not 0 <= slot < self.occupancy:
            raise InvalidInputError(f"slot {slot} is empty")
        out = []
        for codes, meta, bits in ((self.key_codes, self.key_meta, self.pair.key_bits),
                                  (self.value_codes, self.value_meta, self.pair.value_bits)):
            if bits == 16:
                out.append(codes[slot].view(np.float16).astype(np.float64))
            else:
                out.append(QuantizedVector(codes[slot].copy(), float(meta[slot, 0]), float(meta[slot, 1]), bits))
        return out[0], out[1]

    @staticmethod
    def _dequant(codes: np.ndarray, meta: np.ndarray, bits: int) -> np.ndarray:
        if bits == 16:
            return codes.view(np.float16).astype(np.float64)
        m = meta.astype(np.float64)
        return codes.astype(np.float64) * m[:, 0:1] + m[:, 1:2]

    def decode(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(positions, keys, values) of occupied slots in slot order, dequantized to float64."""
        if self._decoded is None:
            n = self.occupancy
            if self.pair is None or n == 0:
                d = self.geometry.head_dim
                self._decoded = (np.zeros(0, np.int64), np.zeros((0, d)), np.zeros((0, d)))
            else:
                self._decoded = (
                    self.positions[:n].astype(np.int64),
                    self._dequant(self.key_codes[:n], self.key_meta[:n], self.pair.key_bits),
                    self._dequant(self.value_codes[:n], self.value_meta[:n], self.pair.value_bits),
                )
        return self._decoded

    # -- serialization -------------------------------------------------

    def layout(self) -> LayoutParams:
        return LayoutParams.for_page(self.geometry.head_dim, self.capacity)

    def to_bytes(self) -> bytes:
        """Six segments in order, zero-padded to ``page_bytes``.

        Codes are tiled per :mod:`kvcompact.layout` and then bit-packed. Metadata
        segments are (scale, zero) float16 pairs per token; scores float32;
        positions int32; all little-endian. Empty slots are zero with position -1.
        """
        if self.pair is None:
            return bytes(self.geometry.page_bytes)
        p = self.layout()
        parts = [
            pack_codes(pack_keys(self.key_codes, p), self.pair.key_bits),
            self.key_meta.astype("<f2").tobytes(),
            pack_codes(pack_values(self.value_codes, p), self.pair.value_bits),
            self.value_meta.astype("<f2").tobytes(),
            self.scores.astype("<f4").tobytes(),
            self.positions.astype("<i4").tobytes(),
        ]
        blob = b"".join(parts)
        if len(blob) > self.geometry.page_bytes:
            raise InvalidStateError(f"serialized page is {len(blob)} bytes, exceeds {self.geometry.page_bytes}")
        return blob + bytes(self.geometry.page_bytes - len(blob))

    @classmethod
    def from_bytes(cls, page_id: int, geometry: PageGeometry, pair: PrecisionPair | None, occupancy: int,
                   blob: bytes) -> "UnifiedPage":
        page = cls(page_id, geometry)
        if pair is None:
            return page
        page.configure(pair)
        d, cap = geometry.head_dim, page.capacity
        p = page.layout()
        off = 0

        def take(nbytes):
            nonlocal off
            chunk = blob[off: off + nbytes]
            off += nbytes
            return chunk

        def codes_len(bits):
            return len(pack_codes(np.zeros(cap * d, dtype=_code_dtype(bits)), bits))

        kb, vb = pair.key_bits, pair.value_bits
        page.key_codes = unpack_keys(unpack_codes(take(codes_len(kb)), kb, cap * d), p).astype(_code_dtype(kb))
        page.key_meta = np.frombuffer(take(cap * 4), dtype="<f2").reshape(cap, 2).astype(np.float16)
        vals = unpack_codes(take(len(pack_codes(np.zeros(p.padded_tokens * d, dtype=_code_dtype(vb)), vb))),
                            vb, p.padded_tokens * d)
        page.value_codes = unpack_values(vals, p).astype(_code_dtype(vb))
        page.value_meta = np.frombuffer(take(cap * 4), dtype="<f2").reshape(cap, 2).astype(np.float16)
        page.scores = np.frombuffer(take(cap * 4), dtype="<f4").astype(np.float32)
        page.positions = np.frombuffer(take(cap * 4), dtype="<i4").astype(np.int32)
        page.occupancy = occupancy
        return page
