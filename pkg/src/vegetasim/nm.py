"""N:M structured-sparsity codec and the unstructured -> row-wise transform.

A compressed row keeps only the (at most) N surviving values of every
M-element block plus one position index per kept value. With M = 4 each
index is 2 bits, so the 32 value slots of a tile-register row need exactly
64 metadata bits. Layout of one row word, entry j at bits [2j, 2j+1]:

    dense row    [1, 0, 2, 0,   0, 3, 0, 4]     2:4, two blocks
    values       [1, 2, 3, 4]
    positions    (0, 2) (1, 3)                  ascending inside each block
    row word     0b..11_01_10_00                entries j = 0..3 -> 0,2,1,3

Under-full blocks are padded with zero values at the smallest unused
positions so every conforming tile has exactly one canonical encoding.
Zero-ness is decided on the bf16 bit pattern: a negative zero (0x8000) is
a stored value and round-trips exactly.

Larger power-of-two block sizes are supported by widening the index to
log2(M) bits; the engine and ISA fix M = 4.
"""

from dataclasses import dataclass, field

import numpy as np

from .bf16 import bf16_array_to_fp32
from .tiles import DenseTile, DType, ShapeError

META_WORD_BITS = 64


class BlockOverflow(ValueError):
    def __init__(self, row: int, block: int, count: int, n: int):
        self.row = row
        self.block = block
        super().__init__(
            f"block {block} of row {row} has {count} non-zeros, pattern allows {n}"
        )


class MetadataInvalid(ValueError):
    def __init__(self, row: int, block: int, reason: str = "positions not strictly ascending"):
        self.row = row
        self.block = block
        super().__init__(f"row {row}, block {block}: {reason}")


@dataclass(frozen=True)
class NMPattern:
    """At most `n` non-zeros in every block of `m` consecutive elements."""

    n: int
    m: int = 4

    def __post_init__(self):
        if self.m < 1 or self.m & (self.m - 1):
            raise ShapeError(f"block size must be a power of two, got {self.m}")
        if not 1 <= self.n <= self.m:
            raise ShapeError(f"need 1 <= n <= m, got {self.n}:{self.m}")

    @property
    def index_bits(self) -> int:
        return (self.m - 1).bit_length()

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        try:
            n, m = text.split(":")
            return cls(int(n), int(m))
        except ValueError as exc:
            raise ShapeError(f"bad pattern {text!r}, expected e.g. '2:4'") from exc

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


@dataclass(eq=False)
class CompressedTile:
    """Non-zero values plus packed position metadata for an N:M sparse tile."""

    pattern: NMPattern
    phys_rows: int
    phys_cols: int  # stored values per row
    values: np.ndarray = field(repr=False)  # float32 (phys_rows, phys_cols), bf16-exact
    metadata: np.ndarray = field(repr=False)  # uint64, one word per row

    def __post_init__(self):
        if self.phys_cols % self.pattern.n:
            raise ShapeError("stored values per row must be a multiple of n")
        if self.phys_cols * self.pattern.index_bits > META_WORD_BITS:
            raise ShapeError(
                f"{self.phys_cols} indexes of {self.pattern.index_bits} bits "
                f"exceed one {META_WORD_BITS}-bit metadata word"
            )
        self.values = np.ascontiguousarray(self.values, dtype="<f4").reshape(
            self.phys_rows, self.phys_cols
        )
        self.metadata = np.ascontiguousarray(self.metadata, dtype="<u8").reshape(
            self.phys_rows
        )

    @property
    def effective_cols(self) -> int:
        return self.phys_cols * self.pattern.m // self.pattern.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedTile):
            return NotImplemented
        return (
            self.pattern == other.pattern
            and self.phys_rows == other.phys_rows
            and self.phys_cols == other.phys_cols
            and np.array_equal(self.values.view("<u4"), other.values.view("<u4"))
            and np.array_equal(self.metadata, other.metadata)
        )


def unpack_positions(metadata: np.ndarray, phys_cols: int, m: int) -> np.ndarray:
    """Unpack per-value position entries from one metadata word per row."""
    w = (m - 1).bit_length()
    shifts = (np.arange(phys_cols, dtype=np.uint64) * np.uint64(w))[None, :]
    words = np.ascontiguousarray(metadata, dtype="<u8").reshape(-1, 1)
    return ((words >> shifts) & np.uint64(m - 1)).astype(np.int64)


def pack_positions(positions: np.ndarray, m: int) -> np.ndarray:
    """Pack per-value position entries into one word per row."""
    w = (m - 1).bit_length()
    phys_cols = positions.shape[-1]
    shifts = (np.arange(phys_cols, dtype=np.uint64) * np.uint64(w))[None, :]
    ent = positions.astype(np.uint64).reshape(-1, phys_cols)
    return np.bitwise_or.reduce(ent << shifts, axis=1)


def _check_ascending(positions: np.ndarray, n: int):
    """positions: (rows, blocks, n). Raise MetadataInvalid on the first offender."""
    if n == 1:
        return
    bad = np.diff(positions, axis=-1) <= 0
    if bad.any():
        r, b, _ = np.argwhere(bad)[0]
        raise MetadataInvalid(int(r), int(b))


def expand_row_bits(value_bits: np.ndarray, metadata: np.ndarray, pattern: NMPattern) -> np.ndarray:
    """Scatter stored bf16 bit patterns back to dense effective rows.

    value_bits: uint16 (rows, phys_cols); metadata: one word per row.
    Validates positions (in range by construction, strictly ascending per
    block) and returns uint16 (rows, phys_cols * m / n).
    """
    rows, phys_cols = value_bits.shape
    n, m = pattern.n, pattern.m
    blocks = phys_cols // n
    positions = unpack_positions(metadata, phys_cols, m).reshape(rows, blocks, n)
    _check_ascending(positions, n)
    cols = np.arange(blocks, dtype=np.int64)[None, :, None] * m + positions
    out = np.zeros((rows, blocks * m), dtype="<u2")
    row_idx = np.arange(rows)[:, None, None]
    out[row_idx, cols] = value_bits.reshape(rows, blocks, n)
    return out


def compress_nm(tile: DenseTile, pattern: NMPattern) -> CompressedTile:
    """Compress a conforming BF16 tile into values + position metadata.

    Every length-m block of every row may hold at most n non-zeros
    (BlockOverflow otherwise). Blocks with fewer than n non-zeros are
    padded with zeros at the smallest unused positions, and the final n
    positions per block are stored in ascending order, which makes the
    encoding canonical and decompress_nm an exact inverse.
    """
    if tile.dtype is not DType.BF16:
        raise ShapeError("compression is defined for BF16 tiles")
    n, m = pattern.n, pattern.m
    if tile.cols % m:
        raise ShapeError(f"tile has {tile.cols} columns, not a multiple of m={m}")
    blocks_per_row = tile.cols // m
    phys_cols = blocks_per_row * n
    if phys_cols * pattern.index_bits > META_WORD_BITS:
        raise ShapeError("row does not fit one metadata word at this pattern")

    bits = tile.bits().reshape(tile.rows, blocks_per_row, m)
    nonzero = bits != 0
    counts = nonzero.sum(axis=-1)
    if (counts > n).any():
        r, b = np.argwhere(counts > n)[0]
        raise BlockOverflow(int(r), int(b), int(counts[r, b]), n)

    # Sort key: non-zero positions first (ascending), then free positions
    # ascending -- the first n entries are the kept positions plus the
    # smallest unused ones, re-sorted to ascending order.
    lane = np.arange(m, dtype=np.int64)
    key = np.where(nonzero, lane, lane + m)
    positions = np.sort(np.sort(key, axis=-1)[..., :n] % m, axis=-1)
    kept = np.take_along_axis(bits, positions, axis=-1)

    return CompressedTile(
        pattern=pattern,
        phys_rows=tile.rows,
        phys_cols=phys_cols,
        values=bf16_array_to_fp32(kept.reshape(tile.rows, phys_cols)),
        metadata=pack_positions(positions.reshape(tile.rows, phys_cols), m),
    )


def decompress_nm(ct: CompressedTile) -> DenseTile:
    """Inverse of compress_nm: phys_rows x effective_cols dense tile."""
    value_bits = (
        np.ascontiguousarray(ct.values, dtype="<f4").view("<u4") >> 16
    ).astype("<u2")
    out = expand_row_bits(value_bits, ct.metadata, ct.pattern)
    return DenseTile.from_bf16_bits(out)


def _nonzero_mask(row: np.ndarray) -> np.ndarray:
    # Bit-level zero test so -0.0 counts as a stored value.
    return np.ascontiguousarray(row, dtype="<f4").view("<u4") != 0


def analyze_row_pattern(row: np.ndarray, m: int = 4) -> NMPattern:
    """Sparsest supported N:M pattern covering all non-zeros in one row.

    Supported N are the powers of two up to m ({1, 2, 4} for m = 4); an
    all-zero row folds into 1:m.
    """
    r = np.asarray(row).reshape(-1)
    if r.size % m:
        raise ShapeError(f"row length {r.size} not a multiple of m={m}")
    worst = int(_nonzero_mask(r).reshape(-1, m).sum(axis=-1).max(initial=0))
    n = 1
    while n < worst:
        n *= 2
    return NMPattern(n, m)


@dataclass(frozen=True)
class GroupRun:
    pattern: NMPattern
    start: int
    length: int  # grouped rows in the run, padding included


@dataclass
class RowWisePlan:
    """Row grouping for a row-wise N:4 tile.

    permutation maps each original row index to its grouped row index;
    grouped rows beyond the originals are synthetic all-zero padding that
    keeps 2:4 runs even-length and 1:4 runs a multiple of four (the
    pseudo row-wise constraint).
    """

    row_patterns: list[NMPattern]
    permutation: np.ndarray  # int64, original row -> grouped row
    group_runs: list[GroupRun]

    @property
    def grouped_rows(self) -> int:
        return sum(run.length for run in self.group_runs)


ROW_WISE_COLS = 64  # weight-tile width: block size x engine rows = 4 x 16

_RUN_MULTIPLE = {4: 1, 2: 2, 1: 4}


def transform_unstructured_to_rowwise(
    tile: DenseTile,
) -> tuple[RowWisePlan, list[CompressedTile]]:
    """Losslessly re-express an unstructured tile as row-wise N:4 runs.

    Rows are grouped by their covering pattern (4:4 first, then 2:4, then
    1:4), each run is padded with all-zero rows up to its required length
    multiple, and each run is compressed with its own pattern. The
    expansion of the runs, inverse-permuted, equals the input exactly.

    A 4:4 row holds 64 stored values, twice what one metadata word can
    index, so 4:4 runs are stored as two physical value rows per logical
    row -- exactly how the 64 slots land in a tile register.
    """
    if tile.dtype is not DType.BF16:
        raise ShapeError("transform is defined for BF16 tiles")
    if tile.cols != ROW_WISE_COLS:
        raise ShapeError(f"tile must be {ROW_WISE_COLS} columns wide, got {tile.cols}")

    patterns = [analyze_row_pattern(tile.values[r]) for r in range(tile.rows)]
    plan_perm = np.empty(tile.rows, dtype=np.int64)
    runs: list[GroupRun] = []
    tiles: list[CompressedTile] = []
    start = 0
    for n in (4, 2, 1):
        members = [r for r in range(tile.rows) if patterns[r].n == n]
        if not members:
            continue
        mult = _RUN_MULTIPLE[n]
        length = -(-len(members) // mult) * mult
        for pos, r in enumerate(members):
            plan_perm[r] = start + pos
        run_bits = np.zeros((length, ROW_WISE_COLS), dtype="<u2")
        run_bits[: len(members)] = tile.bits()[members]
        if n == 4:
            run_bits = run_bits.reshape(2 * length, ROW_WISE_COLS // 2)
        pattern = NMPattern(n, 4)
        tiles.append(compress_nm(DenseTile.from_bf16_bits(run_bits), pattern))
        runs.append(GroupRun(pattern, start, length))
        start += length

    return RowWisePlan(patterns, plan_perm, runs), tiles


def expand_rowwise(plan: RowWisePlan, tiles: list[CompressedTile]) -> DenseTile:
    """Reconstruct the original tile from a plan and its per-run tiles."""
    if len(tiles) != len(plan.group_runs):
        raise ShapeError("plan and compressed runs disagree")
    grouped = np.zeros((plan.grouped_rows, ROW_WISE_COLS), dtype="<u2")
    for run, ct in zip(plan.group_runs, tiles):
        phys_per_row = 2 if run.pattern.n == 4 else 1
        if ct.pattern != run.pattern or ct.phys_rows != phys_per_row * run.length:
            raise ShapeError("compressed run does not match its plan entry")
        bits = decompress_nm(ct).bits().reshape(run.length, ROW_WISE_COLS)
        grouped[run.start : run.start + run.length] = bits
    return DenseTile.from_bf16_bits(grouped[plan.permutation])
