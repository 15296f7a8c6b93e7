import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stereodrop import diffcore as dc
from stereodrop.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from stereodrop.container import read_arrays

GEN_TINY = ["--width", "32", "--height", "16", "--disparity", "1,4"]
DIMS = ["--width", "32", "--height", "16"]
TRAIN_TINY = DIMS + ["--channels", "4,4,4", "--epochs", "2", "--batch", "2", "--augment", "false"]


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--scenes", "2", "--per-scene", "1", "--seed", "3", "--out", str(out)] + GEN_TINY) == EXIT_OK
    return out


def test_gen_layout_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen", "--scenes", "2", "--per-scene", "3", "--seed", "7", "--out", str(out)] + GEN_TINY) == 0
    assert len([d for d in a.iterdir() if d.is_dir()]) == 6
    assert _tree_bytes(a) == _tree_bytes(b)


def test_gen_usage_errors(tmp_path, capsys):
    assert main(["gen", "--scenes", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen", "--scenes", "1", "--width", "30", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--scenes", "1", "--mode", "fog", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE


def test_train_infer_eval_round_trip(tmp_path, data):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt)] + TRAIN_TINY) == EXIT_OK
    metrics = tmp_path / "m_metrics.csv"
    with open(metrics) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "epoch", "lr", "loss_p", "loss_c", "loss_total"]
    assert len(rows) == 1 + 2
    assert metrics.with_suffix(".png").stat().st_size > 0

    pred = tmp_path / "pred"
    assert main(["infer", "--ckpt", str(ckpt), "--sample", str(data), "--out", str(pred)]) == EXIT_OK
    names = sorted(d.name for d in data.iterdir())
    assert sorted(d.name for d in pred.iterdir()) == names
    for n in names:
        _, arr = read_arrays(pred / n, ["O_l", "O_r", "D_l", "D_r"])
        assert arr["O_l"].shape == (3, 16, 32) and arr["D_l"].shape == (1, 16, 32)
        assert 0.0 <= arr["O_l"].min() and arr["O_l"].max() <= 1.0
        for f in ("O_l.png", "O_r.png", "D_l.png", "D_r.png"):
            assert (pred / n / f).stat().st_size > 0

    again = tmp_path / "pred2"
    assert main(["infer", "--ckpt", str(ckpt), "--sample", str(data), "--out", str(again), "--no-png"]) == 0
    for n in names:
        assert (pred / n / "O_l.swdt").read_bytes() == (again / n / "O_l.swdt").read_bytes()
        assert not (again / n / "O_l.png").exists()

    report = tmp_path / "eval.csv"
    assert main(["eval", "--pred", str(pred), "--gt", str(data), "--report", str(report)]) == EXIT_OK
    assert report.with_suffix(".png").stat().st_size > 0


def test_eval_identical_predictions(tmp_path, data):
    report = tmp_path / "r.csv"
    # the clean arrays of the ground truth are their own perfect prediction
    assert main(["eval", "--pred", str(data), "--gt", str(data), "--report", str(report)]) == EXIT_OK
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        assert float(r["psnr_l"]) == 99.0 and float(r["psnr_r"]) == 99.0
        assert float(r["ssim_l"]) == pytest.approx(1.0, abs=1e-12)


def test_eval_against_corrupted_input_field(tmp_path, data):
    report = tmp_path / "r.csv"
    assert main(["eval", "--pred", str(data), "--gt", str(data), "--report", str(report), "--pred-field", "I"]) == 0
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["psnr_l"]) < 99.0 for r in rows)


def test_data_errors(tmp_path, data):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["infer", "--ckpt", str(tmp_path / "nope.ckpt"), "--sample", str(data), "--out", str(tmp_path / "o")]) \
        == EXIT_DATA
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 8)
    assert main(["infer", "--ckpt", str(bad), "--sample", str(data), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["eval", "--pred", str(empty), "--gt", str(data), "--report", str(tmp_path / "r.csv")]) == EXIT_DATA
    victim = sorted(data.iterdir())[0] / "O_l.swdt"
    victim.write_bytes(victim.read_bytes()[:-4])
    assert main(["eval", "--pred", str(data), "--gt", str(data), "--report", str(tmp_path / "r.csv")]) == EXIT_DATA
    # a data root holding no samples
    assert main(["train", "--data", str(empty), "--out", str(tmp_path / "x.ckpt")]) == EXIT_DATA


def test_config_file_and_override(tmp_path, data):
    conf = tmp_path / "run.conf"
    conf.write_text(f"data = {data}\nwidth = 32\nheight = 16\nchannels = 4,4,4\nepochs = 5\nmax_steps = 1\n")
    ckpt = tmp_path / "c.ckpt"
    assert main(["train", "--config", str(conf), "--out", str(ckpt), "--epochs", "1"]) == EXIT_OK
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(conf), "--out", str(ckpt), "--no-such-flag", "1"])
    assert exc.value.code == EXIT_USAGE
    conf.write_text("colour = blue\n")
    assert main(["train", "--config", str(conf), "--out", str(ckpt)]) == EXIT_USAGE
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--lr", "-1"] + DIMS) == EXIT_USAGE


def test_training_divergence_exit_code(tmp_path, data, monkeypatch):
    import stereodrop.trainer as tr

    def boom(*a, **k):
        raise dc.NonFiniteError("loss is nan")
    monkeypatch.setattr(tr, "compute_losses", boom)
    ckpt = tmp_path / "c.ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt)] + TRAIN_TINY) == EXIT_NUMERIC
    assert ckpt.exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "decoder", "--seeds", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and "aggregate_step" in out


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    from stereodrop import checks
    monkeypatch.setattr(checks, "TOLERANCE", -1.0)
    assert main(["gradcheck", "--module", "relu", "--seeds", "1"]) == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_ablate_writes_tables(tmp_path, data):
    out = tmp_path / "abl"
    assert main(["ablate", "--variants", "ours,mono", "--data", str(data), "--out", str(out), "--seeds", "0,1",
                 "--max-steps", "1"] + TRAIN_TINY) == EXIT_OK
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["input", "ours", "mono"]
    assert all(int(r["seeds"]) == 2 for r in rows[1:])
    assert (out / "ablation.png").stat().st_size > 0
    with open(out / "ablation_runs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert main(["ablate", "--variants", "ours,nope", "--data", str(data), "--out", str(out)]) == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "stereodrop", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
    res = subprocess.run([sys.executable, "-m", "stereodrop", "bogus"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE
