import json

import numpy as np
import pytest

from conftest import random_nm_values
from vegetasim import tileio
from vegetasim.cli import main
from vegetasim.tiles import DenseTile


@pytest.fixture
def dense_tile_file(tmp_path, rng):
    tile = DenseTile.from_float(random_nm_values(rng, 16, 64, 2))
    path = tmp_path / "in.vgta"
    tileio.write_tile(path, tile)
    return path, tile


def test_compress_decompress_round_trip(tmp_path, dense_tile_file, capsys):
    in_path, tile = dense_tile_file
    comp = tmp_path / "out.vgta"
    back = tmp_path / "back.vgta"
    assert main(["compress", "--pattern", "2:4", str(in_path), str(comp)]) == 0
    assert main(["decompress", str(comp), str(back)]) == 0
    assert back.read_bytes() == in_path.read_bytes()


def test_compress_error_exit_code(tmp_path, capsys):
    tile = DenseTile.from_float(np.ones((4, 8), np.float32))
    path = tmp_path / "dense.vgta"
    tileio.write_tile(path, tile)
    rc = main(["compress", "--pattern", "1:4", str(path), str(tmp_path / "o.vgta")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_transform_writes_plan_and_runs(tmp_path, rng, capsys):
    a = rng.integers(-8, 9, size=(16, 64)).astype(np.float32)
    a[rng.random((16, 64)) < 0.9] = 0.0
    path = tmp_path / "u.vgta"
    tileio.write_tile(path, DenseTile.from_float(a))
    prefix = tmp_path / "rw"
    assert main(["transform", str(path), str(prefix)]) == 0
    plan = json.loads((tmp_path / "rw.plan.json").read_text())
    assert sum(r["length"] for r in plan["group_runs"]) >= 16
    for run in plan["group_runs"]:
        assert (tmp_path / run["file"]).exists()


def test_asm_disasm_round_trip(tmp_path, capsys):
    src = tmp_path / "k.vga"
    src.write_text("tile_gemm t5, t1, t0  # comment\n")
    out = tmp_path / "k2.vga"
    assert main(["asm", str(src), "-o", str(out)]) == 0
    assert out.read_text() == "tile_gemm t5, t1, t0\n"
    assert main(["disasm", str(out)]) == 0
    assert capsys.readouterr().out == "tile_gemm t5, t1, t0\n"


def test_asm_reports_bad_operand(tmp_path, capsys):
    src = tmp_path / "bad.vga"
    src.write_text("tile_spmm_u t3, t2, t5, m2\n")
    assert main(["asm", str(src)]) == 1
    assert "error:" in capsys.readouterr().err


def test_kernel_counts_example(tmp_path, capsys):
    out = tmp_path / "k"
    rc = main(
        [
            "kernel",
            "--dm", "48", "--dn", "32", "--dk", "128",
            "--sparsity", "2:4", "--variant", "unrolljam3",
            "--out", str(out),
        ]
    )
    assert rc == 0
    manifest = json.loads((tmp_path / "k.manifest.json").read_text())
    assert manifest["predicted"]["tile_loads"] == 22
    text = (tmp_path / "k.vga").read_text()
    assert text.count("tile_spmm_u") == 12


def test_simulate_preset_and_summary(tmp_path, capsys):
    program = tmp_path / "p.vga"
    program.write_text(
        "\n".join(
            f"tile_spmm_v t{5 + i % 3}, t4, v0, m4" for i in range(32)
        )
        + "\n"
    )
    summary_path = tmp_path / "s.json"
    rc = main(
        [
            "simulate",
            "--program", str(program),
            "--preset", "vegeta-s-16-2",
            "--of",
            "--summary", str(summary_path),
            "--trace", str(tmp_path / "t.jsonl"),
        ]
    )
    assert rc == 0
    summary = json.loads(summary_path.read_text())
    # independent stream: 31 issue intervals of 16 plus one full latency
    assert summary["total_cycles"] == 31 * 16 + 49
    assert summary["computes"] == 32


def test_simulate_config_file(tmp_path):
    program = tmp_path / "p.vga"
    program.write_text("tile_gemm t5, t1, t0\n")
    cfg = tmp_path / "engine.cfg"
    cfg.write_text("kind=dense\nalpha=1\nbeta=2\nclock_ghz=1.0\n")
    assert main(["simulate", "--program", str(program), "--config", str(cfg)]) == 0


def test_emulate_with_manifest_and_dump(tmp_path, rng):
    a = random_nm_values(rng, 16, 64, 2)
    b = rng.integers(-8, 9, size=(64, 16)).astype(np.float32)
    from vegetasim.nm import NMPattern, compress_nm

    tileio.write_compressed(tmp_path / "a.vgta", compress_nm(DenseTile.from_float(a), NMPattern(2, 4)))
    tileio.write_tile(tmp_path / "bt.vgta", DenseTile.from_float(b.T))
    manifest = {
        "images": [
            {"addr": 0x10000, "meta_addr": 0x11000, "path": "a.vgta"},
            {"addr": 0x12000, "path": "bt.vgta"},
        ]
    }
    (tmp_path / "image.json").write_text(json.dumps(manifest))
    program = tmp_path / "p.vga"
    program.write_text(
        """
        tile_load_t t4, [0x10000], 64
        tile_load_m m4, [0x11000]
        tile_load_u u0, [0x12000], 64
        tile_spmm_u t5, t4, u0, m4
        tile_store_t [0x20000], t5, 64
        """
    )
    out_tile = tmp_path / "c.vgta"
    rc = main(
        [
            "emulate",
            "--program", str(program),
            "--manifest", str(tmp_path / "image.json"),
            "--mem-mb", "1",
            "--trace", str(tmp_path / "trace.jsonl"),
            "--dump", f"0x20000:16:16:fp32:{out_tile}",
        ]
    )
    assert rc == 0
    got = tileio.read_tile(out_tile)
    expected = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    assert np.array_equal(got.values, expected)
    trace_lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(trace_lines) == 5


def test_roofline_point_and_sweep(tmp_path, capsys):
    assert main(["roofline", "--density", "0.25", "--kind", "dense", "--flops", "1e12", "--bytes", "1e6"]) == 0
    assert "128.000 GFLOPS" in capsys.readouterr().out
    sweep = tmp_path / "roofline.csv"
    assert main(["roofline", "--density", "0.25", "--sweep", str(sweep)]) == 0
    assert sweep.read_text().startswith("arithmetic_intensity")


def test_report_quick(tmp_path, capsys):
    rc = main(
        ["report", "--out-dir", str(tmp_path / "r"), "--workloads", "resnet50-l5"]
    )
    assert rc == 0
    rows = json.loads((tmp_path / "r" / "speedup.json").read_text())
    assert {r["sparsity"] for r in rows} == {"4:4", "2:4", "1:4", "unstructured-95"}
    assert (tmp_path / "r" / "speedup.csv").exists()


def test_usage_error_unknown_workload(tmp_path, capsys):
    assert main(["report", "--out-dir", str(tmp_path), "--workloads", "nope"]) == 1
    assert capsys.readouterr().err.startswith("error:")
