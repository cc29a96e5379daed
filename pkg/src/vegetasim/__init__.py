"""Functional emulator and cycle-level performance model for the VEGETA
sparse tile-GEMM ISA and matrix-engine family."""

from .bf16 import bf16_to_fp32, fp32_to_bf16
from .codegen import GemmSpec, KernelVariant, generate_kernel, predicted_counts
from .emulator import ArchState, exec_instruction, run_program, useful_mac_count
from .engine import (
    EngineConfig,
    EngineKind,
    StageLatencies,
    derive_config,
    preset,
    rowwise_occupancy,
    schedule,
    simulate_kernel,
)
from .isa import Instruction, Opcode, Program, Reg, assemble, disassemble, validate_program
from .nm import (
    CompressedTile,
    NMPattern,
    RowWisePlan,
    analyze_row_pattern,
    compress_nm,
    decompress_nm,
    expand_rowwise,
    transform_unstructured_to_rowwise,
)
from .tiles import DenseTile, DType

__version__ = "0.1.0"
