"""Tile file format (.vgta).

16-byte header: magic "VGTA", format version u8 (=1), dtype code u8
(0 = BF16, 1 = FP32, 2 = compressed), reserved u16, rows u32 LE, cols u32
LE. Dense files carry the row-major scalar payload, little-endian.
Compressed files put the effective dimensions in the header, then pattern
(n u8, m u8), phys_rows u32, phys_cols u32, the bf16 value payload, and
one u64 metadata word per row.
"""

import struct

import numpy as np

from .bf16 import bf16_array_to_fp32
from .nm import CompressedTile, NMPattern
from .tiles import DenseTile, DType

MAGIC = b"VGTA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBBHII")
_DTYPE_CODE = {DType.BF16: 0, DType.FP32: 1}
COMPRESSED_CODE = 2


class TileFileError(ValueError):
    pass


def _header(dtype_code: int, rows: int, cols: int) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, dtype_code, 0, rows, cols)


def _parse_header(blob: bytes, path) -> tuple[int, int, int]:
    if len(blob) < _HEADER.size:
        raise TileFileError(f"{path}: truncated header")
    magic, version, code, _, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TileFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TileFileError(f"{path}: unsupported format version {version}")
    return code, rows, cols


def dense_payload(tile: DenseTile) -> bytes:
    if tile.dtype is DType.BF16:
        return tile.bits().astype("<u2").tobytes()
    return tile.values.astype("<f4").tobytes()


def write_tile(path, tile: DenseTile):
    with open(path, "wb") as fh:
        fh.write(_header(_DTYPE_CODE[tile.dtype], tile.rows, tile.cols))
        fh.write(dense_payload(tile))


def write_compressed(path, ct: CompressedTile):
    with open(path, "wb") as fh:
        fh.write(_header(COMPRESSED_CODE, ct.phys_rows, ct.effective_cols))
        fh.write(struct.pack("<BBII", ct.pattern.n, ct.pattern.m, ct.phys_rows, ct.phys_cols))
        fh.write((ct.values.view("<u4") >> 16).astype("<u2").tobytes())
        fh.write(ct.metadata.astype("<u8").tobytes())


def read_tile(path) -> DenseTile | CompressedTile:
    with open(path, "rb") as fh:
        blob = fh.read()
    code, rows, cols = _parse_header(blob, path)
    body = blob[_HEADER.size :]

    if code == COMPRESSED_CODE:
        n, m, phys_rows, phys_cols = struct.unpack_from("<BBII", body)
        off = struct.calcsize("<BBII")
        nvals = phys_rows * phys_cols
        if len(body) != off + 2 * nvals + 8 * phys_rows:
            raise TileFileError(f"{path}: payload size mismatch")
        bits = np.frombuffer(body, "<u2", count=nvals, offset=off).reshape(
            phys_rows, phys_cols
        )
        words = np.frombuffer(body, "<u8", count=phys_rows, offset=off + 2 * nvals)
        return CompressedTile(
            NMPattern(n, m), phys_rows, phys_cols, bf16_array_to_fp32(bits), words.copy()
        )

    if code == _DTYPE_CODE[DType.BF16]:
        if len(body) != 2 * rows * cols:
            raise TileFileError(f"{path}: payload size mismatch")
        return DenseTile.from_bf16_bits(np.frombuffer(body, "<u2").reshape(rows, cols))
    if code == _DTYPE_CODE[DType.FP32]:
        if len(body) != 4 * rows * cols:
            raise TileFileError(f"{path}: payload size mismatch")
        return DenseTile(rows, cols, DType.FP32, np.frombuffer(body, "<f4").reshape(rows, cols).copy())
    raise TileFileError(f"{path}: unknown dtype code {code}")


def read_dense(path) -> DenseTile:
    tile = read_tile(path)
    if not isinstance(tile, DenseTile):
        raise TileFileError(f"{path}: expected a dense tile file")
    return tile


def read_compressed_file(path) -> CompressedTile:
    tile = read_tile(path)
    if not isinstance(tile, CompressedTile):
        raise TileFileError(f"{path}: expected a compressed tile file")
    return tile
