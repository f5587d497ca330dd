"""Asymmetric INT4 quantization with nibble packing, and FP16 encoding."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError

log = logging.getLogger(__name__)

QMAX = 15
FP16_MAX = float(np.finfo(np.float16).max)


def pack_nibbles(codes) -> bytes:
    """Two 4-bit codes per byte, even index in the low nibble.

    An odd-length input gets a zero high nibble in its last byte.
    """
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > QMAX):
        raise NumericsError("codes must lie in [0, 15]")
    c = codes.astype(np.uint8).ravel()
    if c.size % 2:
        c = np.concatenate([c, np.zeros(1, dtype=np.uint8)])
    return ((c[0::2] & 0x0F) | ((c[1::2] & 0x0F) << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(payload: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size != (count + 1) // 2:
        raise NumericsError(f"payload of {raw.size} bytes cannot hold {count} codes")
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:count]


@dataclass(frozen=True)
class QuantBlock:
    codes: bytes
    scale: float
    zero_point: int
    count: int

    def unpacked(self) -> np.ndarray:
        return unpack_nibbles(self.codes, self.count)

    @property
    def nbytes(self) -> int:
        """Payload plus metadata (scale f64, zero point u8, count u32)."""
        return len(self.codes) + 8 + 1 + 4

    def to_bytes(self) -> bytes:
        return struct.pack("<dBI", self.scale, self.zero_point, self.count) + self.codes

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple[QuantBlock, int]:
        scale, zp, count = struct.unpack_from("<dBI", data, offset)
        offset += struct.calcsize("<dBI")
        n = (count + 1) // 2
        codes = bytes(data[offset : offset + n])
        if len(codes) != n:
            raise NumericsError("truncated INT4 payload")
        return cls(codes, scale, zp, count), offset + n


def quantize_group(values) -> QuantBlock:
    """Affine INT4 over one expert group's residual-factor elements.

    The quantization range is ``[min(v, 0), max(v, 0)]`` so that 0.0 stays
    exactly representable and the zero point never clamps; ``scale`` is the
    range over 15 (1.0 for an all-zero block). Rounding is half-to-even.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise NumericsError("cannot quantize an empty block")
    if not np.all(np.isfinite(v)):
        raise NumericsError("cannot quantize non-finite values")
    lo = min(float(v.min()), 0.0)
    hi = max(float(v.max()), 0.0)
    scale = (hi - lo) / QMAX if hi > lo else 1.0
    zp = int(np.clip(np.round(-lo / scale), 0, QMAX))
    codes = np.clip(np.round(v / scale + zp), 0, QMAX).astype(np.uint8)
    return QuantBlock(pack_nibbles(codes), scale, zp, v.size)


def dequantize_group(q: QuantBlock) -> np.ndarray:
    return q.scale * (q.unpacked().astype(np.float64) - q.zero_point)


def encode_fp16(m) -> tuple[np.ndarray, int]:
    """IEEE binary16 bit patterns (uint16, same shape) and a saturation count.

    Values beyond the half range saturate to +-65504 instead of becoming inf.
    """
    a = np.asarray(m, dtype=np.float64)
    if np.any(np.isnan(a)):
        raise NumericsError("cannot encode NaN as FP16")
    over = np.abs(a) > FP16_MAX
    saturated = int(over.sum())
    if saturated:
        log.warning("encode_fp16: %d values saturated to +-%g", saturated, FP16_MAX)
        a = np.clip(a, -FP16_MAX, FP16_MAX)
    return a.astype(np.float16).view(np.uint16), saturated


def decode_fp16(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float64)
