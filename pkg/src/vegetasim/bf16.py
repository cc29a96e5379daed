"""bfloat16 <-> float32 conversion helpers.

bfloat16 is the upper half of an IEEE-754 float32: 1 sign, 8 exponent and
7 mantissa bits. All conversions here work on raw bit patterns so results
are reproducible bit-for-bit across platforms.
"""

import struct

import numpy as np

__all__ = [
    "fp32_to_bf16",
    "bf16_to_fp32",
    "fp32_array_to_bf16",
    "bf16_array_to_fp32",
    "bf16_quantize",
]


def _f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def fp32_to_bf16(x: float, mode: str = "rne") -> int:
    """Convert one float32 value to a bf16 bit pattern.

    mode "rne" rounds to nearest, ties to even; "truncate" drops the low
    16 bits. Infinities are preserved, NaNs are quieted to 0x7FC0|sign.
    """
    u = _f32_bits(float(x))
    if (u & 0x7F800000) == 0x7F800000:
        if u & 0x007FFFFF:
            return ((u >> 16) & 0x8000) | 0x7FC0
        return (u >> 16) & 0xFFFF
    if mode == "truncate":
        return (u >> 16) & 0xFFFF
    if mode != "rne":
        raise ValueError(f"unknown rounding mode {mode!r}")
    # Round-to-nearest-even: add 0x7FFF plus the parity of the result lsb.
    u += 0x7FFF + ((u >> 16) & 1)
    return (u >> 16) & 0xFFFF


def bf16_to_fp32(bits: int) -> float:
    """Widen a bf16 bit pattern back to the exact float32 it denotes."""
    return struct.unpack("<f", struct.pack("<I", (bits & 0xFFFF) << 16))[0]


def fp32_array_to_bf16(a: np.ndarray, mode: str = "rne") -> np.ndarray:
    """Round a float array to bf16 bit patterns (uint16). Finite inputs only."""
    u = np.ascontiguousarray(a, dtype="<f4").view("<u4")
    if mode == "truncate":
        return (u >> 16).astype("<u2").reshape(np.shape(a))
    if mode != "rne":
        raise ValueError(f"unknown rounding mode {mode!r}")
    r = u + np.uint32(0x7FFF) + ((u >> 16) & 1)
    return (r >> 16).astype("<u2").reshape(np.shape(a))


def bf16_array_to_fp32(bits: np.ndarray) -> np.ndarray:
    """Widen an array of bf16 bit patterns to float32, exactly."""
    b = np.ascontiguousarray(bits, dtype="<u2").astype("<u4")
    return (b << 16).view("<f4").reshape(np.shape(bits))


def bf16_quantize(a: np.ndarray, mode: str = "rne") -> np.ndarray:
    """Snap a float array onto the bf16 grid, returned as float32."""
    return bf16_array_to_fp32(fp32_array_to_bf16(a, mode))
