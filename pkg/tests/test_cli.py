import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from denoq.cli import main
from denoq.container import load_quantized
from denoq.quantizer import QuantConfig, quantize_tensor
from denoq.sparsifier import SparsityConfig, bits_per_element
from denoq.tensor import Tensor, load_tensor, save_tensor


@pytest.fixture
def gaussian(tmp_path):
    def make(shape=(8, 256), seed=0, name="x.dqt"):
        arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
        path = tmp_path / name
        save_tensor(Tensor.from_array(arr), path)
        return path, arr

    return make


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_quantize_metrics_match_library(tmp_path, gaussian, capsys):
    path, arr = gaussian()
    code, out = run(["quantize", path, "--out", tmp_path / "q.dqz", "--bits", 3, "--block-size", 64,
                     "--report", tmp_path / "m.json"], capsys)
    assert code == 0
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert json.loads(out.out) == metrics
    _, summary = quantize_tensor(arr, cfg=QuantConfig(bits=3, block_size=64))
    for key in ("mse", "max_abs_err", "effective_bits", "mean_kappa"):
        assert metrics[key] == getattr(summary, key)
    assert load_quantized(tmp_path / "q.dqz").codes.shape == (8, 256)


def test_quantize_dequantize_round_trip_8bit(tmp_path, gaussian, capsys):
    path, arr = gaussian(seed=3)
    assert run(["quantize", path, "--out", tmp_path / "q.dqz", "--bits", 8, "--block-size", 32], capsys)[0] == 0
    assert run(["dequantize", tmp_path / "q.dqz", "--out", tmp_path / "r.dqt"], capsys)[0] == 0
    rec = load_tensor(tmp_path / "r.dqt").array
    assert rec.shape == arr.shape
    assert np.mean((rec - arr) ** 2) / np.mean(arr**2) <= 1e-4


def test_constant_tensor_has_zero_mse(tmp_path, capsys):
    save_tensor(Tensor.from_array(np.full((4, 64), 1.75, np.float32)), tmp_path / "c.dqt")
    for bits in (1, 4):
        code, out = run(["quantize", tmp_path / "c.dqt", "--out", tmp_path / "c.dqz", "--bits", bits], capsys)
        assert code == 0 and json.loads(out.out)["mse"] == 0.0


def test_fewer_bits_more_error(tmp_path, gaussian, capsys):
    path, _ = gaussian()
    mse = {}
    for bits in (1, 4):
        _, out = run(["quantize", path, "--out", tmp_path / "q.dqz", "--bits", bits], capsys)
        mse[bits] = json.loads(out.out)["mse"]
    assert mse[1] >= mse[4]


def test_quantize_with_structured_sparsity(tmp_path, gaussian, capsys):
    path, _ = gaussian()
    code, out = run(["quantize", path, "--out", tmp_path / "q.dqz", "--mn", "2:4"], capsys)
    assert code == 0 and json.loads(out.out)["sparsity"] == "2:4"
    qt = load_quantized(tmp_path / "q.dqz")
    assert qt.kept.reshape(-1, 4).sum(axis=1).tolist() == [2] * (8 * 64)


def test_sparsify_ternary(tmp_path, gaussian, capsys):
    path, _ = gaussian()
    code, out = run(["sparsify", path, "--out", tmp_path / "s.dqt", "--mn", "1:4", "--ternary"], capsys)
    metrics = json.loads(out.out)
    assert code == 0
    assert metrics["bits_per_element"] == bits_per_element(SparsityConfig.structured(1, 4)) == 0.5
    assert metrics["replaced"] == 3 * 8 * 64
    vals = load_tensor(tmp_path / "s.dqt").array
    assert np.all((vals != 0).reshape(-1, 4).sum(axis=1) == 1)


def test_sparsify_toward_mean(tmp_path, gaussian, capsys):
    path, arr = gaussian(shape=(2, 100))
    code, out = run(["sparsify", path, "--out", tmp_path / "s.dqt", "--sparsity", 0.25,
                     "--mode", "toward-mean", "--block-size", 50], capsys)
    assert code == 0 and json.loads(out.out)["replaced"] == 2 * 2 * 12


def test_sweep_grid(tmp_path, gaussian, capsys):
    path, _ = gaussian(shape=(4, 512))
    code, _ = run(["sweep", path, "--out", tmp_path / "s.csv", "--bits", 1, 2, 4, 8,
                   "--block-size", 32, 128, 512], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 12
    assert [(int(r["bits"]), int(r["block_size"])) for r in rows][:3] == [(1, 32), (1, 128), (1, 512)]


def test_sweep_lambda_zero_stays_finite(tmp_path, gaussian, capsys):
    path, _ = gaussian(shape=(3, 130))
    code, _ = run(["sweep", path, "--out", tmp_path / "s.csv", "--bits", 2, "--block-size", 128,
                   "--lambda", 0, 0.01], capsys)
    assert code == 0
    for row in csv.DictReader(open(tmp_path / "s.csv")):
        assert all(np.isfinite(float(row[k])) for k in ("mse", "mean_kappa", "max_kappa"))


def test_sweep_order_independent_of_threads(tmp_path, gaussian, capsys, monkeypatch):
    path, _ = gaussian(shape=(4, 256))
    outs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("DQ_NUM_THREADS", threads)
        run(["sweep", path, "--out", tmp_path / f"s{threads}.csv", "--bits", 1, 2, 3,
             "--block-size", 16, 64, "--sparsity", "none", "0.5", "2:4"], capsys)
        outs.append((tmp_path / f"s{threads}.csv").read_text())
    assert outs[0] == outs[1]


def test_sweep_toward_mean_beats_zero(tmp_path, capsys):
    diffs = []
    for seed in range(5):
        arr = np.random.default_rng(seed).standard_normal((8, 256)).astype(np.float32) + 1.0
        save_tensor(Tensor.from_array(arr), tmp_path / "x.dqt")
        for mode in ("toward-mean", "zero"):
            run(["sweep", tmp_path / "x.dqt", "--out", tmp_path / f"{mode}.csv", "--bits", 4,
                 "--sparsity", 0.5, "--mode", mode], capsys)
        mean_mse = float(next(csv.DictReader(open(tmp_path / "toward-mean.csv")))["mse"])
        zero_mse = float(next(csv.DictReader(open(tmp_path / "zero.csv")))["mse"])
        diffs.append(zero_mse - mean_mse)
    assert np.mean(diffs) >= 0


def test_matmul_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    save_tensor(Tensor.from_array(rng.standard_normal((4, 256)).astype(np.float32)), tmp_path / "x.dqt")
    save_tensor(Tensor.from_array(rng.standard_normal((256, 3)).astype(np.float32)), tmp_path / "w.dqt")
    code, out = run(["matmul", tmp_path / "x.dqt", tmp_path / "w.dqt", "--bits", 4, "--block-size", 128], capsys)
    assert code == 0
    (report,) = json.loads(out.out)
    assert report["effective_bits_w"] == 4.5


def test_matmul_dimension_mismatch(tmp_path, capsys):
    save_tensor(Tensor.from_array(np.ones((2, 3), np.float32)), tmp_path / "x.dqt")
    save_tensor(Tensor.from_array(np.ones((4, 2), np.float32)), tmp_path / "w.dqt")
    assert run(["matmul", tmp_path / "x.dqt", tmp_path / "w.dqt"], capsys)[0] == 2


def test_train_reports(tmp_path, capsys):
    code, out = run(["train", "--bits", 1, 1, "--lambda", 0.01, "1.0", "--steps", 20,
                     "--report", tmp_path / "r.json", "--losses-csv", tmp_path / "l.csv"], capsys)
    assert code == 0
    reports = json.loads((tmp_path / "r.json").read_text())
    assert [r["label"] for r in reports] == ["float", "A1W1 lambda=0.01", "A1W1 lambda=1"]
    assert all(len(r["losses"]) == 20 for r in reports)
    assert len(json.loads(out.out)) == 3


def test_train_validation(capsys):
    code, out = run(["train", "--steps", 0], capsys)
    assert code == 2 and "steps" in out.err
    assert run(["train", "--bits", 1, 2, 3, "--steps", 1], capsys)[0] == 2


@pytest.mark.parametrize("argv", [["--bits", 0], ["--lambda", -1], ["--block-size", 0], ["--mode", "structured"]])
def test_quantize_validation_errors(tmp_path, gaussian, capsys, argv):
    path, _ = gaussian()
    code, out = run(["quantize", path, "--out", tmp_path / "q.dqz", *argv], capsys)
    assert code == 2 and out.err.startswith("error:")


def test_io_errors(tmp_path, capsys):
    assert run(["quantize", tmp_path / "missing.dqt", "--out", tmp_path / "q.dqz"], capsys)[0] == 3
    (tmp_path / "bad.dqt").write_bytes(b"garbage")
    assert run(["quantize", tmp_path / "bad.dqt", "--out", tmp_path / "q.dqz"], capsys)[0] == 3
    (tmp_path / "bad.dqz").write_bytes(b"garbage")
    assert run(["dequantize", tmp_path / "bad.dqz", "--out", tmp_path / "r.dqt"], capsys)[0] == 3


def test_module_entry_point(tmp_path, gaussian):
    path, _ = gaussian()
    proc = subprocess.run([sys.executable, "-m", "denoq", "quantize", str(path), "--out",
                           str(tmp_path / "q.dqz"), "--bits", "2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["config"]["bits"] == 2
