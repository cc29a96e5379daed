"""VEGETA register model, instruction set, and text assembler/disassembler.

Register file: eight 1 KB tile registers t0-t7 (16 rows x 64 B). Aliased
views: ureg u_i = tregs (2i, 2i+1), vreg v_i = uregs (2i, 2i+1); eight
128 B metadata registers m0-m7 (16 rows x 64 bits).

Assembly grammar, one instruction per line, comments start with '#':

    tile_load_t  t2, [0x1000], 64      # stride optional, defaults to 64
    tile_load_m  m2, [0x2000]          # metadata loads are contiguous
    tile_store_t [0x1400], t5, 64
    tile_gemm    t5, t1, t0
    tile_spmm_u  t5, t2, u0, m2
    tile_spmm_v  t5, t2, v0, m2
    tile_spmm_r  u2, t4, u0, m4, [0x3000]

Compute destinations are read-modify-write accumulators (dst doubles as
src0). tile_spmm_r additionally reads an 8-byte per-row pattern descriptor
from memory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class AsmError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}" if line else message)


class ParseError(AsmError):
    pass


class BadOperandClass(AsmError):
    pass


class BadAlias(AsmError):
    """Aliased register name without a valid treg backing span."""


class RegClass(Enum):
    T = "t"
    U = "u"
    V = "v"
    M = "m"


REG_COUNT = {RegClass.T: 8, RegClass.U: 4, RegClass.V: 2, RegClass.M: 8}
# tregs backing one register of each class
_SPAN = {RegClass.T: 1, RegClass.U: 2, RegClass.V: 4}


@dataclass(frozen=True)
class Reg:
    cls: RegClass
    index: int

    def __post_init__(self):
        if not 0 <= self.index < REG_COUNT[self.cls]:
            raise ValueError(f"no such register {self.cls.value}{self.index}")

    @property
    def tregs(self) -> tuple[int, ...]:
        """Indices of the tregs backing this register (empty for mregs)."""
        if self.cls is RegClass.M:
            return ()
        span = _SPAN[self.cls]
        return tuple(range(self.index * span, (self.index + 1) * span))

    @property
    def bytes(self) -> int:
        return 128 if self.cls is RegClass.M else 1024 * _SPAN[self.cls]

    def __str__(self) -> str:
        return f"{self.cls.value}{self.index}"


def treg(i: int) -> Reg:
    return Reg(RegClass.T, i)


def ureg(i: int) -> Reg:
    return Reg(RegClass.U, i)


def vreg(i: int) -> Reg:
    return Reg(RegClass.V, i)


def mreg(i: int) -> Reg:
    return Reg(RegClass.M, i)


class Opcode(Enum):
    TILE_LOAD_T = "tile_load_t"
    TILE_LOAD_U = "tile_load_u"
    TILE_LOAD_V = "tile_load_v"
    TILE_LOAD_M = "tile_load_m"
    TILE_STORE_T = "tile_store_t"
    TILE_GEMM = "tile_gemm"
    TILE_SPMM_U = "tile_spmm_u"
    TILE_SPMM_V = "tile_spmm_v"
    TILE_SPMM_R = "tile_spmm_r"

    @property
    def is_load(self) -> bool:
        return self.value.startswith("tile_load")

    @property
    def is_store(self) -> bool:
        return self is Opcode.TILE_STORE_T

    @property
    def is_compute(self) -> bool:
        return self in (
            Opcode.TILE_GEMM,
            Opcode.TILE_SPMM_U,
            Opcode.TILE_SPMM_V,
            Opcode.TILE_SPMM_R,
        )


# Operand-class signature per opcode: register classes for (dst, src1,
# src2, meta), plus whether the opcode takes a memory operand / stride /
# row descriptor address.
@dataclass(frozen=True)
class _Signature:
    dst: RegClass | None = None
    src1: RegClass | None = None
    src2: RegClass | None = None
    meta: RegClass | None = None
    mem: bool = False
    stride: bool = False
    row_meta: bool = False


SIGNATURES: dict[Opcode, _Signature] = {
    Opcode.TILE_LOAD_T: _Signature(dst=RegClass.T, mem=True, stride=True),
    Opcode.TILE_LOAD_U: _Signature(dst=RegClass.U, mem=True, stride=True),
    Opcode.TILE_LOAD_V: _Signature(dst=RegClass.V, mem=True, stride=True),
    Opcode.TILE_LOAD_M: _Signature(dst=RegClass.M, mem=True),
    Opcode.TILE_STORE_T: _Signature(src1=RegClass.T, mem=True, stride=True),
    Opcode.TILE_GEMM: _Signature(dst=RegClass.T, src1=RegClass.T, src2=RegClass.T),
    Opcode.TILE_SPMM_U: _Signature(
        dst=RegClass.T, src1=RegClass.T, src2=RegClass.U, meta=RegClass.M
    ),
    Opcode.TILE_SPMM_V: _Signature(
        dst=RegClass.T, src1=RegClass.T, src2=RegClass.V, meta=RegClass.M
    ),
    Opcode.TILE_SPMM_R: _Signature(
        dst=RegClass.U, src1=RegClass.T, src2=RegClass.U, meta=RegClass.M, row_meta=True
    ),
}

DEFAULT_STRIDE = 64


@dataclass
class Instruction:
    opcode: Opcode
    dst: Reg | None = None
    src1: Reg | None = None  # A operand; store source
    src2: Reg | None = None  # B operand
    meta: Reg | None = None  # mreg paired with the sparse A operand
    addr: int | None = None
    stride: int | None = None
    row_meta_addr: int | None = None
    line: int | None = field(default=None, compare=False)

    def registers(self) -> list[Reg]:
        return [r for r in (self.dst, self.src1, self.src2, self.meta) if r is not None]


@dataclass
class Program:
    instructions: list[Instruction] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)


_MNEMONICS = {op.value: op for op in Opcode}
_REG_RE = re.compile(r"([tuvm])(\d+)$")
_MEM_RE = re.compile(r"\[\s*(0x)?([0-9a-fA-F]+)\s*\]$")
_LABEL_RE = re.compile(r"([A-Za-z_]\w*):$")


def _parse_reg(tok: str, want: RegClass, lineno: int, col: int) -> Reg:
    m = _REG_RE.match(tok)
    if not m:
        raise ParseError(f"expected a {want.value}-class register, got {tok!r}", lineno, col)
    cls = RegClass(m.group(1))
    idx = int(m.group(2))
    if cls is not want:
        raise BadOperandClass(
            f"operand {tok!r} is {cls.value}-class, expected {want.value}-class", lineno, col
        )
    if idx >= REG_COUNT[cls]:
        if cls in (RegClass.U, RegClass.V):
            raise BadAlias(f"{tok} has no backing treg pair", lineno, col)
        raise ParseError(f"register index out of range in {tok!r}", lineno, col)
    return Reg(cls, idx)


def _parse_mem(tok: str, lineno: int, col: int) -> int:
    m = _MEM_RE.match(tok)
    if not m:
        raise ParseError(f"expected a memory operand like [0x1000], got {tok!r}", lineno, col)
    return int(m.group(2), 16)


def _split_operands(rest: str, base_col: int) -> list[tuple[str, int]]:
    out = []
    col = base_col
    for part in rest.split(","):
        stripped = part.strip()
        out.append((stripped, col + part.index(stripped[0]) if stripped else col))
        col += len(part) + 1
    return out


def assemble(text: str) -> Program:
    """Parse assembly text into a Program. Raises ParseError and friends."""
    program = Program()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        label = _LABEL_RE.match(stripped)
        if label:
            program.labels[label.group(1)] = len(program.instructions)
            continue
        parts = stripped.split(None, 1)
        mnemonic = parts[0].lower()
        op = _MNEMONICS.get(mnemonic)
        if op is None:
            raise ParseError(f"unknown mnemonic {mnemonic!r}", lineno, line.index(parts[0]) + 1)
        sig = SIGNATURES[op]
        rest = parts[1] if len(parts) > 1 else ""
        operands = _split_operands(rest, line.index(rest) + 1 if rest else 1) if rest else []

        want: list[str] = []
        if op.is_store:
            want = ["mem", "src1"]
        else:
            if sig.dst:
                want.append("dst")
            if sig.mem:
                want.append("mem")
            if sig.src1:
                want.append("src1")
            if sig.src2:
                want.append("src2")
            if sig.meta:
                want.append("meta")
            if sig.row_meta:
                want.append("row_meta")
        if sig.stride and len(operands) == len(want) + 1:
            want.append("stride")
        if len(operands) != len(want):
            raise ParseError(
                f"{mnemonic} takes {len(want)} operands, got {len(operands)}", lineno, 1
            )

        inst = Instruction(op, line=lineno)
        if sig.stride:
            inst.stride = DEFAULT_STRIDE
        for slot, (tok, col) in zip(want, operands):
            if slot == "mem":
                inst.addr = _parse_mem(tok, lineno, col)
            elif slot == "row_meta":
                inst.row_meta_addr = _parse_mem(tok, lineno, col)
            elif slot == "stride":
                try:
                    inst.stride = int(tok, 0)
                except ValueError:
                    raise ParseError(f"bad stride {tok!r}", lineno, col) from None
            else:
                setattr(inst, slot, _parse_reg(tok, getattr(sig, slot), lineno, col))
        program.instructions.append(inst)
    return program


def _format_inst(inst: Instruction) -> str:
    op = inst.opcode
    sig = SIGNATURES[op]
    parts: list[str] = []
    if op.is_store:
        parts = [f"[0x{inst.addr:x}]", str(inst.src1), str(inst.stride)]
    elif op.is_load:
        parts = [str(inst.dst), f"[0x{inst.addr:x}]"]
        if sig.stride:
            parts.append(str(inst.stride))
    else:
        parts = [str(inst.dst), str(inst.src1), str(inst.src2)]
        if sig.meta:
            parts.append(str(inst.meta))
        if sig.row_meta:
            parts.append(f"[0x{inst.row_meta_addr:x}]")
    return f"{op.value} {', '.join(parts)}"


def disassemble(program: Program) -> str:
    """Canonical text for a program; assemble(disassemble(p)) == p."""
    return "\n".join(_format_inst(i) for i in program.instructions) + (
        "\n" if program.instructions else ""
    )


@dataclass(frozen=True)
class Diagnostic:
    index: int
    message: str

    def __str__(self) -> str:
        return f"instruction {self.index}: {self.message}"


def validate_program(program: Program) -> list[Diagnostic]:
    """Static checks; returns an empty list iff the program is well-formed."""
    diags: list[Diagnostic] = []
    for i, inst in enumerate(program.instructions):
        sig = SIGNATURES[inst.opcode]
        for slot in ("dst", "src1", "src2", "meta"):
            want = getattr(sig, slot)
            got = getattr(inst, slot)
            if want is None:
                if got is not None:
                    diags.append(Diagnostic(i, f"{slot} not allowed for {inst.opcode.value}"))
            elif got is None:
                diags.append(Diagnostic(i, f"missing {slot} operand"))
            elif got.cls is not want:
                diags.append(
                    Diagnostic(i, f"{slot} must be {want.value}-class, got {got}")
                )
        if sig.mem:
            if inst.addr is None:
                diags.append(Diagnostic(i, "missing memory address"))
            elif inst.addr < 0:
                diags.append(Diagnostic(i, f"negative address {inst.addr}"))
        if sig.stride:
            if inst.stride is None:
                diags.append(Diagnostic(i, "missing row stride"))
            elif inst.stride < DEFAULT_STRIDE:
                diags.append(
                    Diagnostic(i, f"stride {inst.stride} below the {DEFAULT_STRIDE} B tile row")
                )
        if sig.row_meta and inst.row_meta_addr is None:
            diags.append(Diagnostic(i, "missing row-pattern descriptor address"))
        if sig.row_meta and inst.row_meta_addr is not None and inst.row_meta_addr < 0:
            diags.append(Diagnostic(i, "negative row-pattern descriptor address"))
    return diags
