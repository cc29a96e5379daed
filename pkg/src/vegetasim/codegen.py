"""GEMM/SPMM kernel generation over tiled matrices.

Kernels iterate i-j-k over 16x16-output tiles with T_k set by the A
sparsity (32 dense, 64 at 2:4, 128 at 1:4). Three variants:

  naive        every innermost iteration loads C, B, A (and metadata) and
               stores C: 3*Mt*Nt*Kt tile loads
  regpromoted  C is kept in a register across the k loop:
               2*Mt*Nt*Kt + Mt*Nt tile loads
  unrolljam3   the i loop is unrolled by three and the inner loops jammed,
               so one B load feeds three computes:
               (4/3)*Mt*Nt*Kt + Mt*Nt tile loads

Register assignment is fixed: B in t0/u0/v0 by sparsity, A staged through
t4 (metadata m4), C accumulators in t5 (t5-t7 when unrolled). Metadata
loads ride along with every A load and are reported separately from the
headline tile-load counts.
"""

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bf16 import fp32_array_to_bf16
from .isa import (
    DEFAULT_STRIDE,
    Instruction,
    Opcode,
    Program,
    Reg,
    mreg,
    treg,
    ureg,
    vreg,
)
from .nm import NMPattern, compress_nm
from .tiles import DenseTile, ShapeError

T_M = 16
T_N = 16
_T_K = {"4:4": 32, "2:4": 64, "1:4": 128, "row-wise": 64}


class UnrollError(ValueError):
    pass


@dataclass(frozen=True)
class GemmSpec:
    d_m: int
    d_n: int
    d_k: int
    sparsity: str = "4:4"

    def __post_init__(self):
        if self.sparsity not in _T_K:
            raise ShapeError(f"unknown sparsity {self.sparsity!r}")
        if min(self.d_m, self.d_n, self.d_k) < 1:
            raise ShapeError("dimensions must be positive")

    @property
    def t_k(self) -> int:
        return _T_K[self.sparsity]

    def tile_counts(self) -> tuple[int, int, int]:
        """(M_t, N_t, K_t); dimensions must already be tile multiples."""
        if self.d_m % T_M or self.d_n % T_N or self.d_k % self.t_k:
            raise ShapeError(
                f"{self.d_m}x{self.d_n}x{self.d_k} is not a multiple of "
                f"{T_M}x{T_N}x{self.t_k}; pad before generating"
            )
        return self.d_m // T_M, self.d_n // T_N, self.d_k // self.t_k


class KernelVariant(Enum):
    NAIVE = "naive"
    REGISTER_PROMOTED = "regpromoted"
    UNROLL_JAM3 = "unrolljam3"


@dataclass(frozen=True)
class KernelCounts:
    tile_loads: int  # A + B + C loads; metadata excluded
    metadata_loads: int
    stores: int
    computes: int


def predicted_counts(spec: GemmSpec, variant: KernelVariant) -> KernelCounts:
    """Closed-form instruction counts for a variant.

    The naive kernel stores C every innermost iteration; promotion hoists
    the store out of the k loop along with the load.
    """
    m_t, n_t, k_t = spec.tile_counts()
    mnk = m_t * n_t * k_t
    mn = m_t * n_t
    sparse = spec.sparsity in ("2:4", "1:4")
    stores = mn
    if variant is KernelVariant.NAIVE:
        loads = 3 * mnk
        stores = mnk
    elif variant is KernelVariant.REGISTER_PROMOTED:
        loads = 2 * mnk + mn
    else:
        if m_t % 3:
            raise UnrollError(f"unroll-and-jam by 3 needs M_t % 3 == 0, got M_t={m_t}")
        loads = 4 * mnk // 3 + mn
    return KernelCounts(loads, mnk if sparse else 0, stores, mnk)


# Fixed addresses: regions start at 64 KB and are 4 KB aligned.
_REGION_BASE = 0x10000
_REGION_ALIGN = 0x1000

_B_OPCODE = {"4:4": Opcode.TILE_LOAD_T, "2:4": Opcode.TILE_LOAD_U, "1:4": Opcode.TILE_LOAD_V}
_COMPUTE_OPCODE = {"4:4": Opcode.TILE_GEMM, "2:4": Opcode.TILE_SPMM_U, "1:4": Opcode.TILE_SPMM_V}
_B_REG = {"4:4": treg(0), "2:4": ureg(0), "1:4": vreg(0)}

A_TILE_BYTES = 1024  # 16x32 bf16 values (dense or compressed payload)
A_META_BYTES = 128
C_TILE_BYTES = 1024  # 16x16 fp32


def _region_layout(spec: GemmSpec) -> dict:
    m_t, n_t, k_t = spec.tile_counts()
    b_tile_bytes = 2 * T_N * spec.t_k  # B^T tile, bf16
    sparse = spec.sparsity in ("2:4", "1:4")
    regions = {}
    addr = _REGION_BASE
    for name, tile_bytes, grid in (
        ("a_values", A_TILE_BYTES, (m_t, k_t)),
        ("a_metadata", A_META_BYTES, (m_t, k_t) if sparse else None),
        ("b", b_tile_bytes, (n_t, k_t)),
        ("c", C_TILE_BYTES, (m_t, n_t)),
    ):
        if grid is None:
            continue
        size = tile_bytes * grid[0] * grid[1]
        regions[name] = {"addr": addr, "tile_bytes": tile_bytes, "grid": list(grid), "bytes": size}
        addr = (addr + size + _REGION_ALIGN - 1) // _REGION_ALIGN * _REGION_ALIGN
    return regions


def _tile_addr(region: dict, i: int, j: int) -> int:
    return region["addr"] + (i * region["grid"][1] + j) * region["tile_bytes"]


@dataclass
class _Emitter:
    spec: GemmSpec
    regions: dict
    program: Program = field(default_factory=Program)

    def load(self, op: Opcode, dst: Reg, addr: int):
        stride = None if op is Opcode.TILE_LOAD_M else DEFAULT_STRIDE
        self.program.instructions.append(Instruction(op, dst=dst, addr=addr, stride=stride))

    def load_b(self, j: int, k: int):
        self.load(_B_OPCODE[self.spec.sparsity], _B_REG[self.spec.sparsity], _tile_addr(self.regions["b"], j, k))

    def load_a(self, i: int, k: int):
        self.load(Opcode.TILE_LOAD_T, treg(4), _tile_addr(self.regions["a_values"], i, k))
        if "a_metadata" in self.regions:
            self.load(Opcode.TILE_LOAD_M, mreg(4), _tile_addr(self.regions["a_metadata"], i, k))

    def load_c(self, i: int, j: int, dst: Reg):
        self.load(Opcode.TILE_LOAD_T, dst, _tile_addr(self.regions["c"], i, j))

    def store_c(self, i: int, j: int, src: Reg):
        self.program.instructions.append(
            Instruction(
                Opcode.TILE_STORE_T,
                src1=src,
                addr=_tile_addr(self.regions["c"], i, j),
                stride=DEFAULT_STRIDE,
            )
        )

    def compute(self, acc: Reg):
        op = _COMPUTE_OPCODE[self.spec.sparsity]
        meta = mreg(4) if op is not Opcode.TILE_GEMM else None
        self.program.instructions.append(
            Instruction(op, dst=acc, src1=treg(4), src2=_B_REG[self.spec.sparsity], meta=meta)
        )


def generate_kernel(spec: GemmSpec, variant: KernelVariant) -> tuple[Program, dict]:
    """Emit the kernel program and its operand-placement manifest."""
    if spec.sparsity == "row-wise":
        raise ShapeError(
            "row-wise kernels depend on the data's per-row patterns; "
            "use the occupancy estimator instead"
        )
    m_t, n_t, k_t = spec.tile_counts()
    counts = predicted_counts(spec, variant)
    regions = _region_layout(spec)
    em = _Emitter(spec, regions)

    if variant is KernelVariant.NAIVE:
        for i in range(m_t):
            for j in range(n_t):
                for k in range(k_t):
                    em.load_b(j, k)
                    em.load_a(i, k)
                    em.load_c(i, j, treg(5))
                    em.compute(treg(5))
                    em.store_c(i, j, treg(5))
    elif variant is KernelVariant.REGISTER_PROMOTED:
        for i in range(m_t):
            for j in range(n_t):
                em.load_c(i, j, treg(5))
                for k in range(k_t):
                    em.load_b(j, k)
                    em.load_a(i, k)
                    em.compute(treg(5))
                em.store_c(i, j, treg(5))
    else:
        for i in range(0, m_t, 3):
            for j in range(n_t):
                for u in range(3):
                    em.load_c(i + u, j, treg(5 + u))
                for k in range(k_t):
                    em.load_b(j, k)
                    for u in range(3):
                        em.load_a(i + u, k)
                        em.compute(treg(5 + u))
                for u in range(3):
                    em.store_c(i + u, j, treg(5 + u))

    manifest = {
        "dims": {"d_m": spec.d_m, "d_n": spec.d_n, "d_k": spec.d_k},
        "tile": {"t_m": T_M, "t_n": T_N, "t_k": spec.t_k},
        "sparsity": spec.sparsity,
        "variant": variant.value,
        "regions": regions,
        "predicted": {
            "tile_loads": counts.tile_loads,
            "metadata_loads": counts.metadata_loads,
            "stores": counts.stores,
            "computes": counts.computes,
        },
    }
    return em.program, manifest


def count_opcodes(program: Program) -> KernelCounts:
    """Actual counts from an emitted program, for cross-checks."""
    tile_loads = metadata = stores = computes = 0
    for inst in program.instructions:
        if inst.opcode is Opcode.TILE_LOAD_M:
            metadata += 1
        elif inst.opcode.is_load:
            tile_loads += 1
        elif inst.opcode.is_store:
            stores += 1
        elif inst.opcode.is_compute:
            computes += 1
    return KernelCounts(tile_loads, metadata, stores, computes)


def build_memory_image(manifest: dict, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Pack operand matrices into (address, bytes) placements.

    `a` is the effective dense A (d_m x d_k) and must conform to the
    manifest's sparsity pattern; `b` is d_k x d_n; `c` is the fp32
    accumulator (d_m x d_n). B tiles are stored transposed, row r of a
    register holding column r of the effective B tile.
    """
    dims = manifest["dims"]
    t_k = manifest["tile"]["t_k"]
    sparsity = manifest["sparsity"]
    regions = manifest["regions"]
    a = np.asarray(a, np.float32)
    b = np.asarray(b, np.float32)
    c = np.asarray(c, np.float32)
    if a.shape != (dims["d_m"], dims["d_k"]) or b.shape != (dims["d_k"], dims["d_n"]) or c.shape != (dims["d_m"], dims["d_n"]):
        raise ShapeError("operand shapes do not match the manifest dims")

    placements: list[tuple[int, np.ndarray]] = []

    def place(addr: int, raw: bytes):
        placements.append((addr, np.frombuffer(raw, np.uint8)))

    m_t, k_t = regions["a_values"]["grid"]
    pattern = None if sparsity == "4:4" else NMPattern.parse(sparsity)
    for i in range(m_t):
        for k in range(k_t):
            block = a[i * T_M : (i + 1) * T_M, k * t_k : (k + 1) * t_k]
            if pattern is None:
                payload = fp32_array_to_bf16(block).tobytes()
            else:
                ct = compress_nm(DenseTile.from_float(block), pattern)
                payload = (ct.values.view("<u4") >> 16).astype("<u2").tobytes()
                place(
                    _tile_addr(regions["a_metadata"], i, k),
                    ct.metadata.astype("<u8").tobytes(),
                )
            place(_tile_addr(regions["a_values"], i, k), payload)

    n_t, _ = regions["b"]["grid"]
    for j in range(n_t):
        for k in range(k_t):
            tile = b[k * t_k : (k + 1) * t_k, j * T_N : (j + 1) * T_N]
            place(_tile_addr(regions["b"], j, k), fp32_array_to_bf16(tile.T).tobytes())

    for i in range(m_t):
        for j in range(n_t):
            tile = c[i * T_M : (i + 1) * T_M, j * T_N : (j + 1) * T_N]
            place(_tile_addr(regions["c"], i, j), tile.astype("<f4").tobytes())

    return placements


def write_manifest(manifest: dict, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
