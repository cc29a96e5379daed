import numpy as np
import pytest

from vegetasim.bf16 import fp32_array_to_bf16
from vegetasim.emulator import ArchState
from vegetasim.nm import CompressedTile


def random_nm_values(rng, rows, cols, n, m=4, lo=-8, hi=8):
    """Integer-valued matrix where every m-block holds at most n non-zeros.

    Block fills are drawn from 0..n, so under-full blocks (and all-zero
    rows) occur. Zeroing is by assignment, never by multiplication, so no
    -0.0 sneaks in.
    """
    a = rng.integers(lo, hi + 1, size=(rows, cols)).astype(np.float32)
    blocks = cols // m
    rank = rng.random((rows, blocks, m)).argsort(-1).argsort(-1)
    counts = rng.integers(0, n + 1, size=(rows, blocks, 1))
    a[~(rank < counts).reshape(rows, cols)] = 0.0
    return a


def compressed_bits(ct: CompressedTile) -> np.ndarray:
    return (ct.values.view("<u4") >> 16).astype("<u2")


def write_bf16(state: ArchState, reg, matrix):
    state.reg_bf16_bits(reg)[:] = fp32_array_to_bf16(np.asarray(matrix, np.float32))


def oracle_gemm(c0, a, b):
    """Order-independent reference product; exact on small-integer inputs."""
    return np.asarray(c0, np.float32) + (
        np.asarray(a, np.float64) @ np.asarray(b, np.float64)
    ).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(20260811)


@pytest.fixture
def small_state():
    return ArchState(mem_bytes=1 << 20)
