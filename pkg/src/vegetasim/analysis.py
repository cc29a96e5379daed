"""Roofline throughput model, trace statistics, and cross-config speedups.

The bundled workloads are the evaluation DNN layers expressed as GEMMs
(convolutions via im2col: M = output channels, N = output pixels,
K = input channels x filter area). Dimensions are padded up to tile
multiples before kernel generation; both engines see the same padded
problem, so speedup ratios are unaffected.

Speedups are compute-side: kernels are scheduled on the engine model with
operands assumed resident (zero fill latency). Unstructured sparsity is
estimated analytically instead, by transforming sampled weight tiles to
row-wise N:4 form, packing the rows into tile_spmm_r payloads, and taking
the ratio of dense tile ops to packed payloads, capped by the roofline.
"""

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import codegen
from .codegen import GemmSpec, KernelVariant
from .emulator import StepResult
from .engine import EngineConfig, PipelineTrace, preset, schedule
from .isa import Opcode

MATRIX_PEAK_GFLOPS = 512.0
VECTOR_PEAK_GFLOPS = 64.0
MEM_BW_GBS = 94.0


@dataclass(frozen=True)
class RooflineParams:
    peak_compute: float = MATRIX_PEAK_GFLOPS
    mem_bw: float = MEM_BW_GBS
    kind: str = "sparse"  # "sparse" skips zeros; "dense" burns MACs on them
    density: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.density <= 1.0):
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.peak_compute <= 0 or self.mem_bw <= 0:
            raise ValueError("peak and bandwidth must be positive")
        if self.kind not in ("dense", "sparse"):
            raise ValueError(f"kind must be dense or sparse, got {self.kind!r}")


def roofline_effective_throughput(
    params: RooflineParams, effectual_flops: float, bytes_moved: float
) -> float:
    """Attainable effectual GFLOPS: min(compute roof, AI x bandwidth).

    A sparse engine's compute roof is its peak (zeros are skipped); a
    dense engine burns MACs on zeros, so its effectual roof is peak x
    density.
    """
    if effectual_flops <= 0 or bytes_moved <= 0:
        raise ValueError("workload must be positive")
    roof = params.peak_compute if params.kind == "sparse" else params.peak_compute * params.density
    return min(roof, (effectual_flops / bytes_moved) * params.mem_bw)


@dataclass(frozen=True)
class Workload:
    name: str
    m: int
    n: int
    k: int

    def padded(self) -> tuple[int, int, int]:
        """Tile-multiple dims: N to 16, K to 128 (the largest T_k)."""
        pad = lambda x, q: -(-x // q) * q
        return pad(self.m, 16), pad(self.n, 16), pad(self.k, 128)


# Evaluation layers; convolutions im2col'd to GEMM dims.
WORKLOADS = [
    Workload("resnet50-l1", 64, 3136, 256),
    Workload("resnet50-l2", 64, 3136, 576),
    Workload("resnet50-l3", 256, 3136, 64),
    Workload("resnet50-l4", 128, 784, 1152),
    Workload("resnet50-l5", 512, 784, 128),
    Workload("resnet50-l6", 256, 196, 2304),
    Workload("bert-l1", 512, 768, 768),
    Workload("bert-l2", 512, 512, 768),
    Workload("bert-l3", 512, 768, 512),
    Workload("gpt-l1", 256, 256, 2048),
    Workload("gpt-l2", 512, 512, 2048),
    Workload("gpt-l3", 256, 256, 12288),
]


def workload_by_name(name: str) -> Workload:
    for w in WORKLOADS:
        if w.name == name:
            return w
    raise KeyError(f"unknown workload {name!r}; choose from {[w.name for w in WORKLOADS]}")


@dataclass
class TraceStats:
    per_opcode: dict
    tile_loads: int
    metadata_loads: int
    computes: int
    stores: int
    total_cycles: int | None
    mac_utilization: float | None
    issue_intervals: dict

    def as_dict(self) -> dict:
        return {
            "per_opcode": dict(self.per_opcode),
            "tile_loads": self.tile_loads,
            "metadata_loads": self.metadata_loads,
            "computes": self.computes,
            "stores": self.stores,
            "total_cycles": self.total_cycles,
            "mac_utilization": self.mac_utilization,
            "issue_intervals": {str(k): v for k, v in sorted(self.issue_intervals.items())},
        }


def trace_stats(trace) -> TraceStats:
    """Summarize an emulator trace (list of StepResult) or a PipelineTrace."""
    counts: Counter = Counter()
    intervals: Counter = Counter()
    cycles = util = None
    if isinstance(trace, PipelineTrace):
        counts.update({op.value: n for op, n in trace.opcode_counts.items()})
        cycles = trace.total_cycles
        util = trace.mac_utilization
        starts = [e.issue for e in trace.compute_entries()]
        intervals.update(b - a for a, b in zip(starts, starts[1:]))
    else:
        for step in trace:
            if not isinstance(step, StepResult):
                raise TypeError("expected a PipelineTrace or a list of StepResult")
            counts[step.opcode.value] += 1

    def total(pred) -> int:
        return sum(n for name, n in counts.items() if pred(Opcode(name)))

    return TraceStats(
        per_opcode=dict(counts),
        tile_loads=total(lambda op: op.is_load and op is not Opcode.TILE_LOAD_M),
        metadata_loads=counts.get(Opcode.TILE_LOAD_M.value, 0),
        computes=total(lambda op: op.is_compute),
        stores=counts.get(Opcode.TILE_STORE_T.value, 0),
        total_cycles=cycles,
        mac_utilization=util,
        issue_intervals=dict(intervals),
    )


# -- unstructured sparsity: row-wise packing estimate -----------------------

_SLOTS_PER_ROW = {4: 64, 2: 32, 1: 16}
_PAYLOAD_SLOTS = 512
_MAX_ROWS = 32
_MIN_ROWS = 8


def _close_chunk(c4: int, c2: int, c1: int) -> tuple[int, int]:
    """Rows and slots of a closed payload after grouping/minimum padding."""
    r2 = c2 + c2 % 2
    r1 = -(-c1 // 4) * 4
    rows = c4 + r2 + r1
    if rows < _MIN_ROWS:  # pad with all-zero 1:4 rows
        r1 += _MIN_ROWS - rows
        rows = _MIN_ROWS
    return rows, 64 * c4 + 32 * r2 + 16 * r1


def pack_rowwise_payloads(row_ns) -> int:
    """Greedy count of tile_spmm_r payloads covering the given rows.

    row_ns holds each row's covering N (1, 2 or 4). Rows are grouped by
    pattern (the DMA reorder) and packed densest-first into payloads of at
    most 512 value slots and 32 rows, run lengths padded per the pseudo
    row-wise constraint.
    """
    pending = sorted(row_ns, reverse=True)
    chunks = 0
    c = {4: 0, 2: 0, 1: 0}
    for n in pending:
        trial = dict(c)
        trial[n] += 1
        rows, slots = _close_chunk(trial[4], trial[2], trial[1])
        if rows > _MAX_ROWS or slots > _PAYLOAD_SLOTS:
            chunks += 1
            c = {4: 0, 2: 0, 1: 0}
        c[n] += 1
    if any(c.values()):
        chunks += 1
    return chunks


def _covering_ns(mask_rows: np.ndarray) -> np.ndarray:
    """Covering N per row of a boolean non-zero mask (width multiple of 4)."""
    worst = mask_rows.reshape(mask_rows.shape[0], -1, 4).sum(axis=-1).max(axis=-1)
    return np.where(worst <= 1, 1, np.where(worst <= 2, 2, 4))


def unstructured_speedup_estimate(
    workload: Workload,
    density: float = 0.05,
    seed: int = 7,
    params: RooflineParams | None = None,
) -> float:
    """Row-wise transform speedup over a dense engine for random sparsity.

    Compute side: dense tile ops per 64-wide A strip (M/8 tile_gemms)
    versus packed tile_spmm_r payloads; both issue at the same steady
    interval, so the op ratio is the speedup. The result is capped by the
    roofline ratio at this density.
    """
    m, n, k = workload.padded()
    rng = np.random.default_rng(seed)
    mask = rng.random((m, k)) < density
    dense_ops = 0
    payloads = 0
    slots = 0
    for strip in range(k // 64):
        ns = _covering_ns(mask[:, strip * 64 : (strip + 1) * 64])
        dense_ops += m // 8
        payloads += pack_rowwise_payloads(ns.tolist())
        slots += int((ns * 16).sum())
    compute_speedup = dense_ops / payloads

    p = params or RooflineParams()
    eff_flops = 2.0 * m * n * k * density
    # Traffic convention: compressed A (2 B/value + 2-bit index) read once,
    # dense B read once, C read and written once.
    bytes_sparse = slots * 2.25 + 2.0 * k * n + 8.0 * m * n
    bytes_dense = 2.0 * m * k + 2.0 * k * n + 8.0 * m * n
    sparse_eff = roofline_effective_throughput(
        RooflineParams(p.peak_compute, p.mem_bw, "sparse", density), eff_flops, bytes_sparse
    )
    dense_eff = roofline_effective_throughput(
        RooflineParams(p.peak_compute, p.mem_bw, "dense", density), eff_flops, bytes_dense
    )
    return min(compute_speedup, sparse_eff / dense_eff)


# -- cross-config speedup report --------------------------------------------

STRUCTURED_SPARSITIES = ("4:4", "2:4", "1:4")
UNSTRUCTURED = "unstructured-95"


def _kernel_cycles(workload: Workload, sparsity: str, config: EngineConfig, of: bool) -> int:
    m, n, k = workload.padded()
    program, _ = codegen.generate_kernel(GemmSpec(m, n, k, sparsity), KernelVariant.NAIVE)
    return schedule(program, config, of_enabled=of, record=False).total_cycles


def speedup_report(
    workloads=None,
    sparsities=STRUCTURED_SPARSITIES + (UNSTRUCTURED,),
    baseline: str = "vegeta-d-1-2",
    target: str = "vegeta-s-16-2",
    target_of: bool = True,
    seed: int = 7,
) -> list[dict]:
    """Modeled cycles and speedups of `target` over `baseline`.

    The baseline is a dense engine: it cannot skip zeros, so every
    sparsity runs its dense kernel there. Rows are dicts, one per
    (workload, sparsity).
    """
    workloads = list(workloads) if workloads is not None else WORKLOADS
    base_cfg = preset(baseline)
    tgt_cfg = preset(target)
    rows = []
    for w in workloads:
        base_cycles = _kernel_cycles(w, "4:4", base_cfg, of=False)
        for sparsity in sparsities:
            row = {
                "workload": w.name,
                "sparsity": sparsity,
                "baseline": baseline,
                "target": target + ("+of" if target_of else ""),
                "baseline_cycles": base_cycles,
            }
            if sparsity == UNSTRUCTURED:
                row["target_cycles"] = None
                row["speedup"] = unstructured_speedup_estimate(w, density=0.05, seed=seed)
            else:
                cycles = _kernel_cycles(w, sparsity, tgt_cfg, of=target_of)
                row["target_cycles"] = cycles
                row["speedup"] = base_cycles / cycles
            rows.append(row)
    return rows


_REPORT_FIELDS = ["workload", "sparsity", "baseline", "target", "baseline_cycles", "target_cycles", "speedup"]


def report_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_REPORT_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def report_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2) + "\n"


def roofline_sweep_csv(
    density: float,
    ai_points=None,
    peak: float = MATRIX_PEAK_GFLOPS,
    vector_peak: float = VECTOR_PEAK_GFLOPS,
    bw: float = MEM_BW_GBS,
) -> str:
    """Effective GFLOPS vs arithmetic intensity for the four engine styles."""
    if ai_points is None:
        ai_points = [2.0**e for e in range(-6, 9)]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["arithmetic_intensity", "dense_matrix", "sparse_matrix", "dense_vector", "sparse_vector"]
    )
    for ai in ai_points:
        row = [f"{ai:g}"]
        for peak_g, kind in (
            (peak, "dense"),
            (peak, "sparse"),
            (vector_peak, "dense"),
            (vector_peak, "sparse"),
        ):
            params = RooflineParams(peak_g, bw, kind, density)
            # ai is effectual flops per byte, so flops = ai, bytes = 1.
            row.append(f"{roofline_effective_throughput(params, ai, 1.0):.6g}")
        writer.writerow(row)
    return buf.getvalue()
