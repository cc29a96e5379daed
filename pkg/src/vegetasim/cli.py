"""Command-line interface: vegetasim <subcommand>."""

import argparse
import json
import os
import sys

from . import analysis, codegen, emulator, engine, tileio
from .codegen import GemmSpec, KernelVariant
from .isa import AsmError, assemble, disassemble, validate_program
from .nm import (
    NMPattern,
    compress_nm,
    decompress_nm,
    expand_rowwise,
    transform_unstructured_to_rowwise,
)
from .tiles import DenseTile, DType


class CliError(Exception):
    pass


def _read_dense(path) -> DenseTile:
    tile = tileio.read_tile(path)
    if not isinstance(tile, DenseTile):
        raise CliError(f"{path}: expected a dense tile file")
    return tile


def _cmd_compress(args) -> int:
    tile = _read_dense(args.input)
    ct = compress_nm(tile, NMPattern.parse(args.pattern))
    tileio.write_compressed(args.output, ct)
    print(f"{args.input}: {tile.rows}x{tile.cols} -> {ct.phys_rows}x{ct.phys_cols} values + metadata")
    return 0


def _cmd_decompress(args) -> int:
    ct = tileio.read_tile(args.input)
    if isinstance(ct, DenseTile):
        raise CliError(f"{args.input}: already a dense tile")
    tile = decompress_nm(ct)
    tileio.write_tile(args.output, tile)
    print(f"{args.input}: {ct.pattern} -> {tile.rows}x{tile.cols}")
    return 0


def _cmd_transform(args) -> int:
    tile = _read_dense(args.input)
    plan, tiles = transform_unstructured_to_rowwise(tile)
    paths = []
    for idx, ct in enumerate(tiles):
        path = f"{args.out_prefix}.run{idx}.vgta"
        tileio.write_compressed(path, ct)
        paths.append(os.path.basename(path))
    plan_doc = {
        "row_patterns": [str(p) for p in plan.row_patterns],
        "permutation": plan.permutation.tolist(),
        "group_runs": [
            {"pattern": str(r.pattern), "start": r.start, "length": r.length, "file": paths[i]}
            for i, r in enumerate(plan.group_runs)
        ],
    }
    with open(f"{args.out_prefix}.plan.json", "w") as fh:
        json.dump(plan_doc, fh, indent=2)
        fh.write("\n")
    restored = expand_rowwise(plan, tiles)
    assert restored == tile, "transform round-trip failed"
    for run in plan.group_runs:
        print(f"run {run.pattern}: rows [{run.start}, {run.start + run.length})")
    return 0


def _load_program(path):
    with open(path) as fh:
        program = assemble(fh.read())
    diags = validate_program(program)
    if diags:
        for d in diags:
            print(f"error: {path}: {d}", file=sys.stderr)
        raise CliError(f"{path}: {len(diags)} validation errors")
    return program


def _cmd_asm(args) -> int:
    program = _load_program(args.input)
    doc = disassemble(program)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(doc)
    else:
        sys.stdout.write(doc)
    print(f"# {len(program)} instructions ok", file=sys.stderr)
    return 0


def _cmd_disasm(args) -> int:
    program = _load_program(args.input)
    sys.stdout.write(disassemble(program))
    return 0


def _cmd_emulate(args) -> int:
    program = _load_program(args.program)
    mem_mb = int(os.environ.get("VEGETA_MEM_MB", args.mem_mb))
    state = emulator.ArchState(mem_bytes=mem_mb * 2**20)
    if args.manifest:
        emulator.load_memory_image(state, args.manifest)
    trace = emulator.run_program(state, program)
    if args.trace:
        emulator.write_trace(trace, args.trace)
    for spec in args.dump or []:
        try:
            addr, rows, cols, dtype_name, path = spec.split(":")
            dtype = DType[dtype_name.upper()]
        except (ValueError, KeyError):
            raise CliError(f"bad --dump {spec!r}, want addr:rows:cols:dtype:path") from None
        tileio.write_tile(path, emulator.dump_region(state, int(addr, 0), int(rows), int(cols), dtype))
    print(f"retired {state.retired} instructions")
    return 0


def _settings_from_args(args) -> engine.SimSettings:
    if bool(args.preset) == bool(args.config):
        raise CliError("give exactly one of --preset or --config")
    if args.preset:
        settings = engine.SimSettings(engine.preset(args.preset))
    else:
        with open(args.config) as fh:
            settings = engine.parse_settings(fh.read())
    if args.of:
        settings.of = True
    if args.load_latency is not None:
        settings.load_latency = args.load_latency
    return settings


def _cmd_simulate(args) -> int:
    program = _load_program(args.program)
    settings = _settings_from_args(args)
    trace = engine.simulate_kernel(
        program,
        settings.config,
        of_enabled=settings.of,
        load_latency=settings.load_latency,
        clock_ghz=settings.clock_ghz,
        record=bool(args.trace),
    )
    if args.trace:
        trace.to_jsonl(args.trace)
    summary = trace.summary()
    for key in ("config", "of", "total_cycles", "seconds", "computes", "loads", "stores"):
        print(f"{key:>14}: {summary[key]}")
    print(f"{'utilization':>14}: {summary['mac_utilization']:.4f}")
    if args.summary:
        with open(args.summary, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    return 0


def _cmd_kernel(args) -> int:
    spec = GemmSpec(args.dm, args.dn, args.dk, args.sparsity)
    variant = KernelVariant(args.variant)
    program, manifest = codegen.generate_kernel(spec, variant)
    with open(f"{args.out}.vga", "w") as fh:
        fh.write(disassemble(program))
    codegen.write_manifest(manifest, f"{args.out}.manifest.json")
    actual = codegen.count_opcodes(program)
    for name, value in manifest["predicted"].items():
        print(f"{name:>15}: {value}")
    assert (actual.tile_loads, actual.metadata_loads, actual.stores, actual.computes) == tuple(
        manifest["predicted"].values()
    )
    print(f"wrote {args.out}.vga, {args.out}.manifest.json ({len(program)} instructions)")
    return 0


def _cmd_roofline(args) -> int:
    if args.sweep:
        doc = analysis.roofline_sweep_csv(args.density, peak=args.peak, bw=args.bw)
        with open(args.sweep, "w") as fh:
            fh.write(doc)
        print(f"wrote {args.sweep}")
        return 0
    if args.flops is None or args.bytes is None:
        raise CliError("need --flops and --bytes (or --sweep)")
    params = analysis.RooflineParams(args.peak, args.bw, args.kind, args.density)
    gflops = analysis.roofline_effective_throughput(params, args.flops, args.bytes)
    print(f"effective throughput: {gflops:.3f} GFLOPS")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"effective_gflops": gflops}, fh)
            fh.write("\n")
    return 0


def _cmd_report(args) -> int:
    workloads = None
    if args.workloads:
        workloads = [analysis.workload_by_name(n) for n in args.workloads]
    rows = analysis.speedup_report(workloads=workloads, target_of=not args.no_of)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "speedup.csv")
    json_path = os.path.join(args.out_dir, "speedup.json")
    with open(csv_path, "w") as fh:
        fh.write(analysis.report_to_csv(rows))
    with open(json_path, "w") as fh:
        fh.write(analysis.report_to_json(rows))
    width = max(len(r["workload"]) for r in rows)
    for row in rows:
        print(f"{row['workload']:<{width}}  {row['sparsity']:<16} {row['speedup']:6.3f}x")
    print(f"wrote {csv_path}, {json_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vegetasim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a dense tile at an N:M pattern")
    p.add_argument("--pattern", default="2:4")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("decompress", help="expand a compressed tile file")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=_cmd_decompress)

    p = sub.add_parser("transform", help="unstructured tile -> row-wise N:4 runs")
    p.add_argument("input")
    p.add_argument("out_prefix")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("asm", help="parse, validate and canonicalize a program")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=_cmd_asm)

    p = sub.add_parser("disasm", help="print the canonical text of a program")
    p.add_argument("input")
    p.set_defaults(func=_cmd_disasm)

    p = sub.add_parser("emulate", help="run a program on the functional emulator")
    p.add_argument("--program", required=True)
    p.add_argument("--manifest", help="memory image manifest (images: addr, path)")
    p.add_argument("--trace", help="write a JSON-lines retirement trace")
    p.add_argument("--mem-mb", type=int, default=256)
    p.add_argument(
        "--dump",
        action="append",
        metavar="ADDR:ROWS:COLS:DTYPE:PATH",
        help="write a memory region out as a tile file (repeatable)",
    )
    p.set_defaults(func=_cmd_emulate)

    p = sub.add_parser("simulate", help="cycle-level engine simulation")
    p.add_argument("--program", required=True)
    p.add_argument("--preset", help=f"one of {', '.join(engine.preset_names())}")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--of", action="store_true", help="enable output forwarding")
    p.add_argument("--load-latency", type=int, default=None)
    p.add_argument("--trace", help="write a JSON-lines pipeline trace")
    p.add_argument("--summary", help="write the summary as JSON")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("kernel", help="generate a GEMM/SPMM kernel + manifest")
    p.add_argument("--dm", type=int, required=True)
    p.add_argument("--dn", type=int, required=True)
    p.add_argument("--dk", type=int, required=True)
    p.add_argument("--sparsity", default="4:4", choices=["4:4", "2:4", "1:4"])
    p.add_argument("--variant", default="naive", choices=[v.value for v in KernelVariant])
    p.add_argument("--out", default="kernel")
    p.set_defaults(func=_cmd_kernel)

    p = sub.add_parser("roofline", help="effective-throughput model")
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--kind", choices=["dense", "sparse"], default="sparse")
    p.add_argument("--peak", type=float, default=analysis.MATRIX_PEAK_GFLOPS)
    p.add_argument("--bw", type=float, default=analysis.MEM_BW_GBS)
    p.add_argument("--flops", type=float, help="effectual FLOPs of the workload")
    p.add_argument("--bytes", type=float, help="bytes moved by the workload")
    p.add_argument("--sweep", help="write GFLOPS vs arithmetic intensity CSV")
    p.add_argument("--json", help="write the result as JSON")
    p.set_defaults(func=_cmd_roofline)

    p = sub.add_parser("report", help="speedup table over the bundled workloads")
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--workloads", nargs="*", help="subset of workload names")
    p.add_argument("--no-of", action="store_true", help="disable output forwarding on the target")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, AsmError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
