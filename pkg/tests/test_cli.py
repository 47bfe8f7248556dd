import csv
import io
import json
import subprocess
import sys

import pytest

from splitprec.cli import main

QUICK_BENCH = ["error-bench", "--n", "10,100", "--trials", "3", "--seed", "1"]
QUICK_TRAIN = ["train-toy", "--variants", "fp32,fp16+8", "--samples", "200", "--hidden", "4", "--iters", "2"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def parse_csv(text):
    lines = text.splitlines()
    assert lines[0].startswith("# splitprec ")
    return lines[0], list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def test_error_bench_csv(capsys):
    code, out, _ = run(QUICK_BENCH, capsys)
    assert code == 0
    head, rows = parse_csv(out)
    assert "fingerprint=" in head and "error-bench" in head
    assert {r["variant"] for r in rows} == {"fp32", "fp16", "fp16-rtz", "fp16+8", "fp16+8-rstoc"}
    assert {int(r["n"]) for r in rows} == {10, 100}


def test_json_output(capsys):
    code, out, _ = run(QUICK_BENCH + ["--emit", "json"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["command"] == "error-bench" and len(doc["fingerprint"]) == 16
    assert doc["config"]["seed"] == 1 and len(doc["rows"]) == 10


def test_same_config_same_bytes(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(QUICK_BENCH + ["--out", str(a)]) == 0
    assert main(QUICK_BENCH + ["--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(QUICK_BENCH[:-1] + ["2", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_stochastic_requires_seed(capsys):
    code, _, err = run(["error-bench", "--n", "10", "--trials", "2"], capsys)
    assert code == 2 and "--seed" in err
    code, _, _ = run(["error-bench", "--n", "10", "--trials", "2", "--round", "rtz"], capsys)
    assert code == 0
    code, _, err = run(["train-toy", "--variants", "fp16+8-rstoc", "--samples", "100", "--iters", "1"], capsys)
    assert code == 2 and "--seed" in err


@pytest.mark.parametrize("argv", [
    ["error-bench", "--extra-bits", "14", "--seed", "0"],
    ["error-bench", "--n", "0"],
    ["error-bench", "--n", "ten"],
    ["absorb", "--format", "fp64"],
    ["train-toy", "--variants", "fp16+30"],
    ["train-toy", "--lr", "nan"],
    ["memory-model", "--scenarios", "fp16+40"],
    ["memory-model", "--optimizer", "lion"],
    ["frobnicate"],
])
def test_bad_config_exit_2(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and err


def test_dataset_error_names_line(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("x1,x2,label\n0.1,0.2,0\n0.3,oops,1\n")
    code, _, err = run(QUICK_TRAIN + ["--data", str(data)], capsys)
    assert code == 2 and "d.csv:3" in err


def test_missing_dataset_exit_3(tmp_path, capsys):
    code, _, err = run(QUICK_TRAIN + ["--data", str(tmp_path / "nope.csv")], capsys)
    assert code == 3 and "nope.csv" in err


def test_unwritable_output_exit_3(tmp_path, capsys):
    code, _, _ = run(["memory-model", "--out", str(tmp_path / "missing" / "x.csv")], capsys)
    assert code == 3


def test_train_toy_with_dataset(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("".join(f"{i % 7 - 3},{(i * 3) % 5 - 2},{i % 2}\n" for i in range(60)))
    code, out, _ = run(QUICK_TRAIN + ["--data", str(data)], capsys)
    assert code == 0
    _, rows = parse_csv(out)
    assert len(rows) == 4 and {"loss", "accuracy", "peak_total_bytes"} <= set(rows[0])


def test_absorb(capsys):
    code, out, _ = run(["absorb", "--round", "rtz"], capsys)
    assert code == 0
    _, rows = parse_csv(out)
    finals = {r["variant"]: float(r["final"]) for r in rows}
    assert finals["fp16+0-rtz"] == 1.0 and finals["fp16+13-rtz"] > 1.09


def test_memory_model(capsys):
    code, out, _ = run(["memory-model", "--scenarios", "amp,fp16+16+fused", "--optimizer", "sgdm,adam"], capsys)
    assert code == 0
    _, rows = parse_csv(out)
    amp = {r["optimizer"]: r for r in rows if r["scenario"] == "amp"}
    assert float(amp["sgdm"]["persistent_bytes_per_param"]) == 14.0
    assert float(amp["adam"]["persistent_bytes_per_param"]) == 18.0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "splitprec", "memory-model", "--emit", "json"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["command"] == "memory-model"
