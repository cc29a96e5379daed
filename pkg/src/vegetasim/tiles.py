"""Dense 2D tiles: the unit of data moved by tile loads/stores.

A tile is a 2D block of scalars stored row-major. BF16 tiles keep their
values as float32 that are exactly representable in bf16 (low 16 mantissa
bits zero), so arithmetic and comparisons stay bit-exact.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bf16 import bf16_array_to_fp32, bf16_quantize


class DType(Enum):
    BF16 = 0
    FP32 = 1

    @property
    def itemsize(self) -> int:
        return 2 if self is DType.BF16 else 4


class ShapeError(ValueError):
    """Dimension or dtype precondition violated."""


def _f32_bits_view(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(values, dtype="<f4").view("<u4")


@dataclass(eq=False)
class DenseTile:
    rows: int
    cols: int
    dtype: DType
    values: np.ndarray = field(repr=False)  # float32, shape (rows, cols)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype="<f4")
        if v.size != self.rows * self.cols:
            raise ShapeError(
                f"payload has {v.size} scalars, expected {self.rows}x{self.cols}"
            )
        v = v.reshape(self.rows, self.cols)
        if self.dtype is DType.BF16 and (_f32_bits_view(v) & 0xFFFF).any():
            raise ShapeError("BF16 tile contains values not representable in bf16")
        self.values = v

    @classmethod
    def from_float(cls, array, dtype: DType = DType.BF16) -> "DenseTile":
        """Build a tile from arbitrary floats, rounding to the target dtype."""
        a = np.asarray(array, dtype=np.float32)
        if a.ndim != 2:
            raise ShapeError("expected a 2D array")
        if dtype is DType.BF16:
            a = bf16_quantize(a)
        return cls(a.shape[0], a.shape[1], dtype, a)

    @classmethod
    def from_bf16_bits(cls, bits: np.ndarray) -> "DenseTile":
        b = np.asarray(bits)
        if b.ndim != 2:
            raise ShapeError("expected a 2D array")
        return cls(b.shape[0], b.shape[1], DType.BF16, bf16_array_to_fp32(b))

    def bits(self) -> np.ndarray:
        """Tile payload as uint16 bf16 patterns. BF16 tiles only."""
        if self.dtype is not DType.BF16:
            raise ShapeError("bit view is only defined for BF16 tiles")
        return (_f32_bits_view(self.values) >> 16).astype("<u2").reshape(
            self.rows, self.cols
        )

    def __eq__(self, other) -> bool:
        # Bit-level equality: distinguishes +0.0 / -0.0, treats NaN == NaN.
        if not isinstance(other, DenseTile):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.dtype == other.dtype
            and bool(
                np.array_equal(_f32_bits_view(self.values), _f32_bits_view(other.values))
            )
        )
