"""Cycle-level model of the VEGETA-D / VEGETA-S matrix-engine family.

Geometry. An engine is an N_rows x N_cols grid of PEs; each PE holds
alpha PUs (broadcast factor) of beta MAC lanes (reduction factor). Every
output element takes 32 effectual MACs, so

    n_rows = 32 / beta
    n_cols = total_macs / (n_rows * alpha * beta)

Pipeline. A tile compute instruction flows through Weight Load (n_rows
cycles), Feed First (T_n = 16), Feed Second (n_rows - 1), Drain (n_cols)
and, when beta > 1, a final reduction stage of log2(beta) cycles. No two
in-flight instructions may occupy the same stage on the same cycle; the
reported drain latency is the drain plus reduction total, n_cols +
log2(beta).

Scheduling is greedy and in-order. Loads and stores occupy no engine
stage and complete after a configurable fill latency (0 in engine-only
mode: the modeled workloads assume operands are staged in the L2 ahead of
time, and register reuse hazards other than true accumulate dependencies
are assumed renamed away by the host core). A compute's weight load waits
for its A and metadata registers; its feed waits for B and C. When two
computes accumulate into the same C register the consumer's feed must
wait for the producer's writeback -- unless output forwarding is on, in
which case it may start exactly n_rows + log2(beta) cycles after the
producer's feed began, the moment the first forwarded C element is ready.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .isa import Opcode, Program, RegClass
from .nm import RowWisePlan

EFFECTUAL_MACS_PER_OUTPUT = 32
T_N = 16  # columns of an input tile fed per instruction
DEFAULT_TOTAL_MACS = 512
DEFAULT_CLOCK_GHZ = 0.5
USEFUL_MACS_PER_COMPUTE = 8192


class ConfigError(ValueError):
    pass


class IllegalOpcodeForConfig(ValueError):
    pass


class GroupingViolation(ValueError):
    pass


class EngineKind(Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class EngineConfig:
    kind: EngineKind
    alpha: int
    beta: int
    total_macs: int
    n_rows: int
    n_cols: int
    reduction_latency: int
    name: str = ""

    @property
    def supported_patterns(self) -> tuple[str, ...]:
        if self.kind is EngineKind.DENSE:
            return ("4:4",)
        return ("1:4", "2:4", "4:4", "row-wise")

    def allows(self, opcode: Opcode) -> bool:
        if not opcode.is_compute:
            return True
        if self.kind is EngineKind.SPARSE:
            return True
        return opcode is Opcode.TILE_GEMM


def derive_config(
    kind: EngineKind,
    alpha: int,
    beta: int,
    total_macs: int = DEFAULT_TOTAL_MACS,
    name: str = "",
) -> EngineConfig:
    """Derive the full design point from (kind, alpha, beta, total MACs)."""
    if alpha < 1 or beta < 1 or beta & (beta - 1) or alpha & (alpha - 1):
        raise ConfigError("alpha and beta must be positive powers of two")
    if EFFECTUAL_MACS_PER_OUTPUT % beta:
        raise ConfigError(f"beta={beta} does not divide {EFFECTUAL_MACS_PER_OUTPUT}")
    if kind is EngineKind.SPARSE and beta != 2:
        raise ConfigError("sparse engines fix beta = M/2 = 2")
    n_rows = EFFECTUAL_MACS_PER_OUTPUT // beta
    per_col = n_rows * alpha * beta
    if total_macs % per_col:
        raise ConfigError(
            f"total_macs={total_macs} not divisible by n_rows*alpha*beta={per_col}"
        )
    n_cols = total_macs // per_col
    return EngineConfig(
        kind=kind,
        alpha=alpha,
        beta=beta,
        total_macs=total_macs,
        n_rows=n_rows,
        n_cols=n_cols,
        reduction_latency=int(math.log2(beta)),
        name=name or f"vegeta-{kind.value[0]}-{alpha}-{beta}",
    )


_PRESET_PARAMS = {
    "vegeta-d-1-1": (EngineKind.DENSE, 1, 1),
    "vegeta-d-1-2": (EngineKind.DENSE, 1, 2),
    "vegeta-d-16-1": (EngineKind.DENSE, 16, 1),
    "vegeta-s-1-2": (EngineKind.SPARSE, 1, 2),
    "vegeta-s-2-2": (EngineKind.SPARSE, 2, 2),
    "vegeta-s-4-2": (EngineKind.SPARSE, 4, 2),
    "vegeta-s-8-2": (EngineKind.SPARSE, 8, 2),
    "vegeta-s-16-2": (EngineKind.SPARSE, 16, 2),
}


def preset(name: str) -> EngineConfig:
    key = name.lower()
    if key not in _PRESET_PARAMS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESET_PARAMS)}")
    kind, alpha, beta = _PRESET_PARAMS[key]
    return derive_config(kind, alpha, beta, name=key)


def preset_names() -> list[str]:
    return list(_PRESET_PARAMS)


@dataclass(frozen=True)
class StageLatencies:
    wl: int  # weight load: n_rows
    ff: int  # feed first: T_n
    fs: int  # feed second: n_rows - 1
    dr: int  # drain proper: n_cols
    red: int  # final reduction: log2(beta), 0 when beta == 1

    @classmethod
    def from_config(cls, cfg: EngineConfig) -> "StageLatencies":
        return cls(cfg.n_rows, T_N, cfg.n_rows - 1, cfg.n_cols, cfg.reduction_latency)

    @property
    def drain_latency(self) -> int:
        """Reported drain: drain stage plus reduction, n_cols + log2(beta)."""
        return self.dr + self.red

    @property
    def issue_interval(self) -> int:
        """Steady-state spacing of an independent stream: the widest stage."""
        return max(self.wl, self.ff, self.fs, self.dr, self.red)

    @property
    def single_latency(self) -> int:
        return self.wl + self.ff + self.fs + self.dr + self.red


@dataclass
class TraceEntry:
    index: int
    opcode: Opcode
    issue: int  # WL start for computes, queue slot for loads/stores
    ff_start: int | None
    end: int  # writeback complete / data available
    dep_stall: int


@dataclass
class PipelineTrace:
    config: EngineConfig
    latencies: StageLatencies
    of_enabled: bool
    total_cycles: int = 0
    compute_count: int = 0
    load_count: int = 0
    store_count: int = 0
    useful_macs: int = 0
    dep_stall_cycles: int = 0
    seconds: float = 0.0
    opcode_counts: Counter = field(default_factory=Counter)
    entries: list[TraceEntry] = field(default_factory=list)

    @property
    def mac_utilization(self) -> float:
        if self.total_cycles == 0:
            return 0.0
        return self.useful_macs / (self.config.total_macs * self.total_cycles)

    def compute_entries(self) -> list[TraceEntry]:
        return [e for e in self.entries if e.opcode.is_compute]

    def stage_windows(self, entry: TraceEntry) -> dict:
        """Half-open [start, end) cycles per stage, plus the C writeback window."""
        if not entry.opcode.is_compute:
            return {}
        lat = self.latencies
        s = entry.issue
        bounds = {
            "wl": (s, s + lat.wl),
            "ff": (entry.ff_start, entry.ff_start + lat.ff),
            "fs": (s + lat.wl + lat.ff, s + lat.wl + lat.ff + lat.fs),
            "dr": (s + lat.wl + lat.ff + lat.fs, s + lat.wl + lat.ff + lat.fs + lat.dr),
        }
        if lat.red:
            bounds["red"] = (entry.end - lat.red, entry.end)
        # output elements emerge in feed order, n_rows + log2(beta) after feed
        bounds["writeback"] = (entry.ff_start + lat.wl + lat.red, entry.end)
        return bounds

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for e in self.entries:
                record = {
                    "index": e.index,
                    "opcode": e.opcode.value,
                    "issue": e.issue,
                    "end": e.end,
                    "dep_stall": e.dep_stall,
                }
                record.update({k: list(v) for k, v in self.stage_windows(e).items()})
                fh.write(json.dumps(record) + "\n")
            fh.write(json.dumps({"summary": self.summary()}) + "\n")

    def summary(self) -> dict:
        return {
            "config": self.config.name,
            "of": self.of_enabled,
            "total_cycles": self.total_cycles,
            "seconds": self.seconds,
            "computes": self.compute_count,
            "loads": self.load_count,
            "stores": self.store_count,
            "mac_utilization": self.mac_utilization,
            "dep_stall_cycles": self.dep_stall_cycles,
            "opcodes": {op.value: n for op, n in sorted(self.opcode_counts.items(), key=lambda kv: kv[0].value)},
        }


def schedule(
    program: Program,
    config: EngineConfig,
    of_enabled: bool = False,
    load_latency: int = 0,
    record: bool = True,
) -> PipelineTrace:
    """Greedy in-order schedule of a program onto one engine.

    Returns a PipelineTrace; set record=False to skip per-instruction
    entries on very large programs (summary fields are still filled).
    """
    lat = StageLatencies.from_config(config)
    wl, ff, fs, dr, red = lat.wl, lat.ff, lat.fs, lat.dr, lat.red
    off_fs = wl + ff
    off_dr = off_fs + fs
    off_red = off_dr + dr
    length = off_red + red
    of_gap = wl + red  # n_rows + log2(beta): first forwarded C element

    wl_free = ff_free = fs_free = dr_free = red_free = 0
    treg_ready = [0] * 8
    mreg_ready = [0] * 8
    # Last compute writing each treg: (ff_start, end); None once reloaded.
    treg_writer: list[tuple[int, int] | None] = [None] * 8

    trace = PipelineTrace(config, lat, of_enabled)
    entries = trace.entries
    opcode_counts = trace.opcode_counts
    floor = 0
    last_completion = 0

    for index, inst in enumerate(program.instructions):
        op = inst.opcode
        opcode_counts[op] += 1

        if op.is_compute:
            if not config.allows(op):
                raise IllegalOpcodeForConfig(f"{op.value} not supported on {config.name}")
            structural = max(
                floor,
                wl_free,
                ff_free - wl,
                fs_free - off_fs,
                dr_free - off_dr,
                red_free - off_red,
            )
            ready = structural
            for t in inst.src1.tregs:  # A register feeds the weight-load stage
                if treg_ready[t] > ready:
                    ready = treg_ready[t]
            if inst.meta is not None and mreg_ready[inst.meta.index] > ready:
                ready = mreg_ready[inst.meta.index]
            for t in inst.src2.tregs:  # B is consumed from the feed stages on
                if treg_ready[t] - wl > ready:
                    ready = treg_ready[t] - wl
            for t in inst.dst.tregs:  # C accumulate dependency
                writer = treg_writer[t]
                if writer is None:
                    bound = treg_ready[t]
                else:
                    bound = writer[0] + of_gap if of_enabled else writer[1]
                if bound - wl > ready:
                    ready = bound - wl
            start = ready
            f = start + wl
            end = start + length
            wl_free = f
            ff_free = f + ff
            fs_free = start + off_fs + fs
            dr_free = start + off_dr + dr
            red_free = start + off_red + red
            for t in inst.dst.tregs:
                treg_writer[t] = (f, end)
                treg_ready[t] = end
            floor = start
            trace.compute_count += 1
            trace.useful_macs += USEFUL_MACS_PER_COMPUTE
            trace.dep_stall_cycles += start - structural
            if end > last_completion:
                last_completion = end
            if record:
                entries.append(TraceEntry(index, op, start, f, end, start - structural))

        elif op.is_load:
            t0 = floor
            done = t0 + load_latency
            if inst.dst.cls is RegClass.M:
                mreg_ready[inst.dst.index] = done
            else:
                for t in inst.dst.tregs:
                    treg_ready[t] = done
                    treg_writer[t] = None
            floor = t0
            trace.load_count += 1
            if done > last_completion:
                last_completion = done
            if record:
                entries.append(TraceEntry(index, op, t0, None, done, 0))

        else:  # store: queued, drains once the source data is ready
            t0 = floor
            done = t0
            for t in inst.src1.tregs:
                if treg_ready[t] > done:
                    done = treg_ready[t]
            floor = t0
            trace.store_count += 1
            if done > last_completion:
                last_completion = done
            if record:
                entries.append(TraceEntry(index, op, t0, None, done, 0))

    trace.total_cycles = last_completion
    return trace


@dataclass(frozen=True)
class Occupancy:
    cols_used: int  # SPU-column groups engaged; 8 means fully packed
    h_a: int  # weight-tile rows mapped


def rowwise_occupancy(plan: RowWisePlan, config: EngineConfig) -> Occupancy:
    """Array occupancy of a row-wise plan: N4:4 + N2:4/2 + N1:4/4 columns
    over H_A = N4:4 + N2:4 + N1:4 mapped rows."""
    if config.kind is not EngineKind.SPARSE:
        raise ConfigError("row-wise mapping needs a sparse engine")
    seen = set()
    counts = {4: 0, 2: 0, 1: 0}
    for run in plan.group_runs:
        n = run.pattern.n
        if run.pattern.m != 4 or n not in counts:
            raise GroupingViolation(f"unsupported run pattern {run.pattern}")
        if n in seen:
            raise GroupingViolation(f"pattern {run.pattern} appears in two runs")
        seen.add(n)
        if n == 2 and run.length % 2:
            raise GroupingViolation("2:4 runs must have even length")
        if n == 1 and run.length % 4:
            raise GroupingViolation("1:4 runs must be a multiple of four rows")
        counts[n] += run.length
    cols_used = counts[4] + counts[2] // 2 + counts[1] // 4
    return Occupancy(cols_used, counts[4] + counts[2] + counts[1])


@dataclass
class SimSettings:
    config: EngineConfig
    of: bool = False
    clock_ghz: float = DEFAULT_CLOCK_GHZ
    load_latency: int = 0


def parse_settings(text: str) -> SimSettings:
    """Engine settings from a preset name or key=value lines."""
    stripped = text.strip()
    if stripped.lower() in _PRESET_PARAMS:
        return SimSettings(preset(stripped))
    kv = {}
    for lineno, line in enumerate(stripped.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip().lower() for part in line.split("=", 1))
        kv[key] = value
    unknown = set(kv) - {"preset", "kind", "alpha", "beta", "total_macs", "of", "clock_ghz", "load_latency"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "preset" in kv:
        cfg = preset(kv["preset"])
    else:
        try:
            kind = EngineKind(kv.get("kind", "dense"))
        except ValueError:
            raise ConfigError(f"kind must be dense or sparse, got {kv.get('kind')!r}") from None
        cfg = derive_config(
            kind,
            int(kv.get("alpha", 1)),
            int(kv.get("beta", 1 if kind is EngineKind.DENSE else 2)),
            int(kv.get("total_macs", DEFAULT_TOTAL_MACS)),
        )
    return SimSettings(
        config=cfg,
        of=kv.get("of", "0") in ("1", "true", "yes", "on"),
        clock_ghz=float(kv.get("clock_ghz", DEFAULT_CLOCK_GHZ)),
        load_latency=int(kv.get("load_latency", 0)),
    )


def simulate_kernel(
    program: Program,
    config: EngineConfig,
    of_enabled: bool = False,
    load_latency: int = 0,
    clock_ghz: float = DEFAULT_CLOCK_GHZ,
    record: bool = True,
) -> PipelineTrace:
    """Schedule a full kernel and attach wall-clock seconds to the summary."""
    trace = schedule(program, config, of_enabled, load_latency, record)
    trace.seconds = trace.total_cycles / (clock_ghz * 1e9)
    return trace
