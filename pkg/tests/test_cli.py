import json

import numpy as np
import pytest

from hano.cli import main


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_gen_trig_and_eval_pipeline(tmp_path, capsys):
    data = tmp_path / "d.bin"
    rc, out, _ = run(capsys, "gen-trig", "--resolution", "16", "--samples", "10", "--seed", "2",
                     "--out", str(data))
    assert rc == 0
    summary = json.loads(out)
    assert summary["samples"] == 10 and summary["max_residual"] <= 1e-9
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"levels": 2, "widths": [4, 4], "windows": [3, 3], "cycles": 1},
                               "train": {"spectrum_k": 5}}))
    out_dir = tmp_path / "run"
    rc, out, _ = run(capsys, "train", "--data", str(data), "--config", str(cfg), "--epochs", "2",
                     "--batch", "3", "--n-train", "6", "--n-val", "2", "--n-test", "2", "--out", str(out_dir))
    assert rc == 0, out
    assert json.loads(out)["epochs"] == 2
    for f in ("history.csv", "spectrum.csv", "best.hck", "last.hck", "history.png", "spectrum_test.png"):
        assert (out_dir / f).stat().st_size > 0
    rc, out, _ = run(capsys, "eval", "--checkpoint", str(out_dir / "best.hck"), "--data", str(data),
                     "--start", "8")
    res = json.loads(out)
    assert rc == 0 and res["samples"] == 2 and np.isfinite(res["rel_l2"])
    rep = tmp_path / "rep"
    rc, out, _ = run(capsys, "spectral-report", "--spectrum", str(out_dir / "spectrum.csv"), "--out", str(rep))
    assert rc == 0 and (rep / "spectrum_train.png").exists()
    rc, out, _ = run(capsys, "spectral-report", "--checkpoint", str(out_dir / "best.hck"), "--data", str(data),
                     "--k", "4", "--out", str(rep))
    assert rc == 0 and len(json.loads(out)["normalised"]) == 4


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"depth": 3}}))
    rc, _, err = run(capsys, "train", "--data", "x", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert rc == 2 and "depth" in err


def test_gen_darcy_seed_from_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HANO_SEED", "11")
    rc, out, _ = run(capsys, "gen-darcy", "--resolution", "9", "--samples", "2", "--out", str(tmp_path / "a"))
    assert rc == 0
    rc, out, _ = run(capsys, "gen-darcy", "--resolution", "9", "--samples", "2", "--seed", "11",
                     "--out", str(tmp_path / "b"))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("argv", [
    ["gen-darcy", "--samples", "0", "--out", "x"],
    ["gen-darcy", "--samples", "2", "--amin", "20", "--out", "x"],
    ["gen-trig", "--samples", "2", "--out", "/nonexistent/dir/x"],
    ["verify-hmatrix", "--tokens", "15"],
    ["verify-hmatrix", "--tokens", "16384"],
    ["bench-complexity", "--sides", "128,64"],
    ["spectral-report", "--out", "x"],
    ["no-such-command"],
])
def test_usage_errors(capsys, argv):
    try:
        rc = main(argv)
    except SystemExit as e:   # argparse-level errors
        rc = e.code
    assert rc == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    (tmp_path / "junk").write_bytes(b"not a dataset")
    rc, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "junk"), "--data", str(tmp_path / "junk"))
    assert rc == 1 and "FormatError" in err


def test_verify_hmatrix(capsys):
    rc, out, _ = run(capsys, "verify-hmatrix", "--tokens", "64", "--levels", "3", "--seed", "4")
    rep = json.loads(out)
    assert rc == 0 and rep["max_abs_diff"] < 1e-10 and rep["ranks"] == {"1": 2, "2": 2}
    rc, out, _ = run(capsys, "verify-hmatrix", "--tokens", "64", "--levels", "3", "--corrupt")
    assert rc == 1 and not json.loads(out)["pass"]


def test_bench_complexity(tmp_path, capsys):
    rc, out, _ = run(capsys, "bench-complexity", "--sides", "32,64", "--levels", "3", "--width", "8",
                     "--out", str(tmp_path / "b.csv"))
    assert rc == 0
    lines = out.strip().split("\n")
    assert lines[0] == "side,tokens,hier_flops,dense_flops,hier_ms" and len(lines) == 3
    assert (tmp_path / "b.png").exists() and (tmp_path / "b.csv").read_text() == out
