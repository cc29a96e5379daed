"""Architecturally precise execution of VEGETA programs.

State is 8 KB of tile-register backing store (u/v registers are aliased
views over consecutive tregs), eight 128 B metadata registers, and a flat
byte-addressable memory. B operands are stored transposed in their
registers: row r of the register holds column r of the effective B tile.

MAC semantics: bf16 x bf16 products are computed exactly in fp32 (8-bit
significands make the product exact); accumulation is fp32 with
round-to-nearest-even, in ascending effective-k order starting from the
incoming C value. That order is the architectural definition; on
integer-valued operands any order gives the same bits, which is how the
engine model's lane-partitioned order is validated against this one.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .bf16 import bf16_array_to_fp32
from .isa import Instruction, Opcode, Program, Reg, RegClass
from .nm import MetadataInvalid, NMPattern, compress_nm, expand_row_bits, unpack_positions
from .tiles import DenseTile, DType
from . import tileio

TREG_BYTES = 1024
TREG_ROWS = 16
ROW_BYTES = 64
NUM_TREGS = 8
NUM_MREGS = 8
MREG_ROWS = 16
DEFAULT_MEM_BYTES = 256 * 2**20

# Row-pattern descriptor code points for tile_spmm_r (2 bits per row):
# 0b00 inactive (tail only), 0b01 = 1:4, 0b10 = 2:4, 0b11 = 4:4.
ROW_CODE_TO_N = {1: 1, 2: 2, 3: 4}
N_TO_ROW_CODE = {1: 1, 2: 2, 4: 3}
SPMM_R_MIN_ROWS = 8
SPMM_R_MAX_ROWS = 32
ROW_WISE_WIDTH = 64

USEFUL_MACS_PER_TILE_OP = 8192  # 16x16 outputs x 32 effectual MACs


class OutOfBounds(IndexError):
    def __init__(self, addr: int, nbytes: int, size: int):
        self.addr = addr
        super().__init__(f"access of {nbytes} B at 0x{addr:x} exceeds memory of {size} B")


class RowDescriptorInvalid(ValueError):
    pass


class NotACompute(ValueError):
    pass


class EmulationError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"instruction {index}: {cause}")


class ArchState:
    """Register file plus flat memory; mutated in place, single-owner."""

    def __init__(self, mem_bytes: int = DEFAULT_MEM_BYTES):
        self.tile_bytes = np.zeros(NUM_TREGS * TREG_BYTES, np.uint8)
        self.mregs = np.zeros((NUM_MREGS, MREG_ROWS), "<u8")
        self.memory = np.zeros(mem_bytes, np.uint8)
        self.retired = 0

    # -- register views ----------------------------------------------------

    def reg_bytes(self, reg: Reg) -> np.ndarray:
        """Mutable byte view of a t/u/v register's backing store."""
        if reg.cls is RegClass.M:
            raise ValueError("metadata registers are word-addressed, use .mregs")
        lo = reg.tregs[0] * TREG_BYTES
        return self.tile_bytes[lo : lo + reg.bytes]

    def reg_bf16_bits(self, reg: Reg) -> np.ndarray:
        """Register content as bf16 bit patterns, 16 logical rows."""
        return self.reg_bytes(reg).view("<u2").reshape(TREG_ROWS, -1)

    def reg_bf16(self, reg: Reg) -> np.ndarray:
        return bf16_array_to_fp32(self.reg_bf16_bits(reg))

    def treg_fp32(self, index: int) -> np.ndarray:
        """Mutable 16x16 fp32 view of a treg (the C-tile interpretation)."""
        lo = index * TREG_BYTES
        return self.tile_bytes[lo : lo + TREG_BYTES].view("<f4").reshape(16, 16)

    def ureg_fp32(self, index: int) -> np.ndarray:
        """Mutable 32x16 fp32 view of a ureg (tile_spmm_r C tile)."""
        lo = index * 2 * TREG_BYTES
        return self.tile_bytes[lo : lo + 2 * TREG_BYTES].view("<f4").reshape(32, 16)

    # -- memory ------------------------------------------------------------

    def _check(self, addr: int, nbytes: int):
        if addr < 0 or addr + nbytes > self.memory.size:
            raise OutOfBounds(addr, nbytes, self.memory.size)

    def mem_read(self, addr: int, nbytes: int) -> np.ndarray:
        self._check(addr, nbytes)
        return self.memory[addr : addr + nbytes]

    def mem_write(self, addr: int, data: np.ndarray):
        data = np.ascontiguousarray(data, np.uint8).reshape(-1)
        self._check(addr, data.size)
        self.memory[addr : addr + data.size] = data

    def place_tile(self, addr: int, tile: DenseTile):
        """Drop a tile's raw payload into memory (row-major, contiguous)."""
        self.mem_write(addr, np.frombuffer(tileio.dense_payload(tile), np.uint8))


@dataclass
class StepResult:
    opcode: Opcode
    operands: dict
    addr: int | None = None
    useful_macs: int | None = None
    index: int | None = None


def _mac_accumulate(c: np.ndarray, a_eff: np.ndarray, b_t: np.ndarray):
    """c (R,16) += a_eff (R,K) x b, with b stored transposed as b_t (16,K).

    Ascending-k accumulation; every += rounds once in fp32.
    """
    for k in range(a_eff.shape[1]):
        c += np.multiply.outer(a_eff[:, k], b_t[:, k])


def _load_rows(state: ArchState, inst: Instruction, reg_bytes: np.ndarray, rows: int):
    stride = inst.stride if inst.stride is not None else ROW_BYTES
    for r in range(rows):
        reg_bytes[r * ROW_BYTES : (r + 1) * ROW_BYTES] = state.mem_read(
            inst.addr + r * stride, ROW_BYTES
        )


def _decode_row_descriptor(raw: np.ndarray) -> list[int]:
    """8-byte descriptor -> per-row N values; row i sits at bits [2i, 2i+1]."""
    codes = [(int(raw[i // 4]) >> (2 * (i % 4))) & 3 for i in range(SPMM_R_MAX_ROWS)]
    try:
        active_rows = codes.index(0)
    except ValueError:
        active_rows = SPMM_R_MAX_ROWS
    if any(codes[active_rows:]):
        raise RowDescriptorInvalid("inactive row code 0b00 before an active row")
    if not SPMM_R_MIN_ROWS <= active_rows <= SPMM_R_MAX_ROWS:
        raise RowDescriptorInvalid(f"{active_rows} active rows, need 8..32")
    ns = [ROW_CODE_TO_N[c] for c in codes[:active_rows]]
    if sum(16 * n for n in ns) > TREG_BYTES // 2:
        raise RowDescriptorInvalid("row patterns need more than 512 value slots")
    return ns


def _exec_spmm_r(state: ArchState, inst: Instruction) -> int:
    ns = _decode_row_descriptor(state.mem_read(inst.row_meta_addr, 8))
    payload = state.reg_bf16_bits(inst.src1).reshape(-1)  # 512 value slots
    words = state.mregs[inst.meta.index]
    entries = (
        (words[:, None] >> (2 * np.arange(32, dtype=np.uint64))) & np.uint64(3)
    ).astype(np.int64).reshape(-1)

    a_eff = np.zeros((len(ns), ROW_WISE_WIDTH), "<u2")
    offset = 0
    for row, n in enumerate(ns):
        slots = 16 * n
        pos = entries[offset : offset + slots].reshape(16, n)
        if n > 1 and (np.diff(pos, axis=-1) <= 0).any():
            block = int(np.argwhere(np.diff(pos, axis=-1) <= 0)[0][0])
            raise MetadataInvalid(row, block)
        cols = np.arange(16)[:, None] * 4 + pos
        a_eff[row, cols.reshape(-1)] = payload[offset : offset + slots]
        offset += slots

    b_t = state.reg_bf16(inst.src2)  # (16, 64): column r of B in row r
    c = state.ureg_fp32(inst.dst.index)[: len(ns)]  # rows >= R left unmodified
    _mac_accumulate(c, bf16_array_to_fp32(a_eff), b_t)
    return 16 * sum(16 * n for n in ns)


_SPMM_PATTERN = {Opcode.TILE_SPMM_U: NMPattern(2, 4), Opcode.TILE_SPMM_V: NMPattern(1, 4)}


def exec_instruction(state: ArchState, inst: Instruction) -> StepResult:
    """Execute one instruction against the architectural state."""
    op = inst.opcode
    macs = None

    if op in (Opcode.TILE_LOAD_T, Opcode.TILE_LOAD_U, Opcode.TILE_LOAD_V):
        reg = inst.dst
        _load_rows(state, inst, state.reg_bytes(reg), reg.bytes // ROW_BYTES)
    elif op is Opcode.TILE_LOAD_M:
        raw = state.mem_read(inst.addr, 128)
        state.mregs[inst.dst.index] = np.frombuffer(raw.tobytes(), "<u8")
    elif op is Opcode.TILE_STORE_T:
        src = state.reg_bytes(inst.src1)
        stride = inst.stride if inst.stride is not None else ROW_BYTES
        for r in range(TREG_ROWS):
            state.mem_write(inst.addr + r * stride, src[r * ROW_BYTES : (r + 1) * ROW_BYTES])
    elif op is Opcode.TILE_GEMM:
        a = state.reg_bf16(inst.src1)  # (16, 32)
        b_t = state.reg_bf16(inst.src2)  # (16, 32)
        _mac_accumulate(state.treg_fp32(inst.dst.index), a, b_t)
        macs = USEFUL_MACS_PER_TILE_OP
    elif op in _SPMM_PATTERN:
        pattern = _SPMM_PATTERN[op]
        bits = state.reg_bf16_bits(inst.src1)  # (16, 32) stored values
        words = state.mregs[inst.meta.index]
        a_eff = bf16_array_to_fp32(expand_row_bits(bits, words, pattern))
        b_t = state.reg_bf16(inst.src2)  # (16, 64) or (16, 128)
        _mac_accumulate(state.treg_fp32(inst.dst.index), a_eff, b_t)
        macs = USEFUL_MACS_PER_TILE_OP
    elif op is Opcode.TILE_SPMM_R:
        macs = _exec_spmm_r(state, inst)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unhandled opcode {op}")

    state.retired += 1
    operands = {
        slot: str(reg)
        for slot, reg in (
            ("dst", inst.dst),
            ("src1", inst.src1),
            ("src2", inst.src2),
            ("meta", inst.meta),
        )
        if reg is not None
    }
    if inst.row_meta_addr is not None:
        operands["row_meta_addr"] = f"0x{inst.row_meta_addr:x}"
    return StepResult(op, operands, addr=inst.addr, useful_macs=macs)


def run_program(state: ArchState, program: Program) -> list[StepResult]:
    """Execute in order; returns the retired-instruction trace."""
    trace = []
    for i, inst in enumerate(program.instructions):
        try:
            step = exec_instruction(state, inst)
        except Exception as exc:
            raise EmulationError(i, exc) from exc
        step.index = i
        trace.append(step)
    return trace


def useful_mac_count(inst: Instruction, descriptor: bytes | None = None) -> int:
    """Effectual MACs performed by one compute instruction.

    tile_gemm / tile_spmm_u / tile_spmm_v always perform 8192. For
    tile_spmm_r the count depends on the row descriptor; without one the
    full 512-slot payload is assumed (also 8192).
    """
    if not inst.opcode.is_compute:
        raise NotACompute(f"{inst.opcode.value} performs no MACs")
    if inst.opcode is Opcode.TILE_SPMM_R and descriptor is not None:
        ns = _decode_row_descriptor(np.frombuffer(descriptor, np.uint8))
        return 16 * sum(16 * n for n in ns)
    return USEFUL_MACS_PER_TILE_OP


def encode_row_descriptor(ns: list[int]) -> bytes:
    """Encode per-row N values into the 8-byte tile_spmm_r descriptor."""
    if not SPMM_R_MIN_ROWS <= len(ns) <= SPMM_R_MAX_ROWS:
        raise RowDescriptorInvalid(f"{len(ns)} rows, need 8..32")
    raw = bytearray(8)
    for i, n in enumerate(ns):
        raw[i // 4] |= N_TO_ROW_CODE[n] << (2 * (i % 4))
    return bytes(raw)


def pack_row_wise_operands(rows: np.ndarray, ns: list[int]) -> tuple[np.ndarray, np.ndarray, bytes]:
    """Pack R x 64 effective rows into tile_spmm_r operands.

    Row r must conform to ns[r]:4 sparsity. Returns the 16x32 bf16 value
    payload (rows packed contiguously in descriptor order), the 16
    metadata words for the paired mreg, and the 8-byte row descriptor.
    """
    rows = np.asarray(rows, np.float32)
    if rows.shape != (len(ns), ROW_WISE_WIDTH):
        raise ValueError(f"expected ({len(ns)}, {ROW_WISE_WIDTH}) rows, got {rows.shape}")
    descriptor = encode_row_descriptor(ns)
    payload = np.zeros(512, "<u2")
    entries = np.zeros(512, np.uint64)
    offset = 0
    for r, n in enumerate(ns):
        slots = 16 * n
        if n == 4:  # dense row: all 64 values, trivial indices
            tile = DenseTile.from_float(rows[r : r + 1])
            payload[offset : offset + slots] = tile.bits()[0]
            entries[offset : offset + slots] = np.tile(np.arange(4, dtype=np.uint64), 16)
        else:
            ct = compress_nm(DenseTile.from_float(rows[r : r + 1]), NMPattern(n, 4))
            payload[offset : offset + slots] = (ct.values.view("<u4") >> 16).astype("<u2")[0]
            entries[offset : offset + slots] = unpack_positions(ct.metadata, slots, 4)[0]
        offset += slots
    if offset > 512:
        raise RowDescriptorInvalid("row patterns need more than 512 value slots")
    shifts = (2 * np.arange(32, dtype=np.uint64))[None, :]
    words = np.bitwise_or.reduce(entries.reshape(16, 32) << shifts, axis=1)
    return payload.reshape(TREG_ROWS, 32), words, descriptor


def write_trace(trace: list[StepResult], path):
    """Retired-instruction trace as JSON-lines."""
    with open(path, "w") as fh:
        for step in trace:
            fh.write(
                json.dumps(
                    {
                        "index": step.index,
                        "opcode": step.opcode.value,
                        "operands": step.operands,
                        "addr": step.addr,
                    }
                )
                + "\n"
            )


def load_memory_image(state: ArchState, manifest_path):
    """Place tile files into memory per a manifest's `images` list.

    Each entry is {"addr": <int>, "path": <tile file>}; compressed tile
    files also take "meta_addr" for the metadata words. Paths are
    relative to the manifest file.
    """
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    for entry in manifest.get("images", []):
        path = os.path.join(base, entry["path"])
        tile = tileio.read_tile(path)
        if isinstance(tile, DenseTile):
            state.place_tile(int(entry["addr"]), tile)
        else:
            bits = (tile.values.view("<u4") >> 16).astype("<u2")
            state.mem_write(int(entry["addr"]), np.frombuffer(bits.tobytes(), np.uint8))
            if "meta_addr" not in entry:
                raise ValueError(f"{path}: compressed image needs meta_addr")
            state.mem_write(
                int(entry["meta_addr"]),
                np.frombuffer(tile.metadata.astype("<u8").tobytes(), np.uint8),
            )
    return manifest


def dump_region(state: ArchState, addr: int, rows: int, cols: int, dtype: DType) -> DenseTile:
    """Read a row-major tile back out of memory."""
    nbytes = rows * cols * dtype.itemsize
    raw = state.mem_read(addr, nbytes).tobytes()
    if dtype is DType.BF16:
        return DenseTile.from_bf16_bits(np.frombuffer(raw, "<u2").reshape(rows, cols))
    return DenseTile(rows, cols, DType.FP32, np.frombuffer(raw, "<f4").reshape(rows, cols).copy())
