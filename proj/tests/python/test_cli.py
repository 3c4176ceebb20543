import csv
import json
import os
import subprocess
from pathlib import Path

import pytest

CLI = os.environ.get("COLIN_CLI", "colin")


def run(*args, cwd=None, check=True):
    proc = subprocess.run([CLI, *map(str, args)], cwd=cwd, capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"exit {proc.returncode}: {proc.stderr}")
    return proc


def test_simulate_single_iteration_has_two_rows(tmp_path):
    run("simulate", "--m", 8, "--k", 2, "--n", 9, "--seeds", 1, "--iters", 1, "--out", tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert [r["arm"] for r in rows] == ["with_OL", "without_OL"]
    assert rows[0]["loss"] == rows[1]["loss"]


def test_simulate_is_byte_deterministic(tmp_path):
    args = ["simulate", "--m", 12, "--k", 3, "--n", 20, "--lr", 1e-3, "--iters", 30, "--seeds", 2]
    run(*args, "--out", tmp_path / "a")
    run(*args, "--out", tmp_path / "b", "--threads", 2)
    for name in ("trace.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_size_sweep_gaps_match_traces(tmp_path):
    run("simulate", "--m", 12, "--k", 3, "--lr", 1e-3, "--iters", 20, "--seeds", 2, "--sizes", "10,30", "--out", tmp_path)
    gaps = json.loads((tmp_path / "gaps.json").read_text())
    entries = gaps if isinstance(gaps, list) else gaps["gaps"]
    assert [g["n"] for g in entries] == [10, 30]
    for g in entries:
        rows = list(csv.DictReader(open(tmp_path / f"trace_n{g['n']}.csv")))
        last = max(int(r["iter"]) for r in rows)
        final = {"with_OL": [], "without_OL": []}
        for r in rows:
            if int(r["iter"]) == last:
                final[r["arm"]].append(float(r["loss"]))
        ol = sum(final["with_OL"]) / len(final["with_OL"])
        no = sum(final["without_OL"]) / len(final["without_OL"])
        assert g["gap"] == pytest.approx((no - ol) / no, rel=1e-9)


def test_usage_errors_exit_2():
    assert run("simulate", "--bogus", check=False).returncode == 2
    assert run("simulate", "--m", 4, "--k", 5, "--n", 10, check=False).returncode == 2


def test_config_file_with_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"m": 384, "n": 768, "beta": 8, "alpha": 1}))
    out = run("params", "--config", cfg).stdout
    assert "0.96875" in out
    out2 = run("params", "--config", cfg, "--beta", 16).stdout
    assert "0.96875" not in out2


def test_zero_adapter_fuses_to_zero(tmp_path):
    run("init-adapter", "--d", 6, "--h", 4, "--beta", 2, "--alpha", 2, "--init", "zero", "--out", tmp_path / "a.json")
    run("fuse", "--in", tmp_path / "a.json", "--out", tmp_path / "f.json")
    fused = json.loads((tmp_path / "f.json").read_text())
    for name, shape in (("w_down", (4, 6)), ("w_up", (6, 4))):
        assert (fused[name]["rows"], fused[name]["cols"]) == shape
        assert all(v == 0.0 for v in fused[name]["data"])


def test_bench_fuse_small():
    proc = run("bench-fuse", "--d", 4, "--h", 3, "--beta", 2, "--alpha", 2, "--tokens", 2)
    assert "fused" in proc.stdout


def test_deltaw_square_case():
    proc = run("deltaw", "--eta", "1e-4")
    assert proc.returncode == 0


def test_gradcheck_single(tmp_path):
    run("gradcheck", "--suite", "single", "--out", tmp_path / "g.json")
    report = json.loads((tmp_path / "g.json").read_text())
    assert report["passed"] and report["max_rel_error"] <= 1e-5


def test_gradcheck_failure_exits_1():
    # A tolerance no double-precision difference can meet.
    assert run("gradcheck", "--suite", "single", "--tol", "1e-14", check=False).returncode == 1
