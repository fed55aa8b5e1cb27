import subprocess
import sys

import numpy as np
import pytest

from overnet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from overnet.cli import main
from overnet.imageops import bicubic_resize, png_read, png_write, synthetic_image
from overnet.model import init_params, param_count, tiny_config, zero_params

TINY = tiny_config()
TINY_TEXT = "base_channels = 16\nnum_ldgs = 1\nrbs_per_ldg = 2\ntotal_iters = 3\nbatch_size = 2\npatch = 8\n"


@pytest.fixture()
def data_dir(tmp_path):
    d = tmp_path / "hr"
    d.mkdir()
    png_write(d / "one.png", synthetic_image(64, 64, seed=1))
    png_write(d / "two.png", synthetic_image(48, 64, seed=2))
    return d


@pytest.fixture()
def zero_ckpt(tmp_path):
    path = tmp_path / "zero.ovnt"
    save_checkpoint(path, Checkpoint(zero_params(TINY), TINY))
    return path


@pytest.fixture()
def rand_ckpt(tmp_path):
    path = tmp_path / "rand.ovnt"
    save_checkpoint(path, Checkpoint(init_params(TINY, 0), TINY))
    return path


def _png(path, h, w, seed=0):
    png_write(path, synthetic_image(h, w, seed=seed))
    return path


# --- train ---------------------------------------------------------------------------


def test_train_missing_config(tmp_path, data_dir, capsys):
    code = main(["train", "--config", str(tmp_path / "missing.cfg"), "--data", str(data_dir),
                 "--out", str(tmp_path / "m.ovnt")])
    assert code == 2
    assert "missing.cfg" in capsys.readouterr().err


def test_train_duplicate_key(tmp_path, data_dir, capsys):
    cfg = tmp_path / "dup.cfg"
    cfg.write_text(TINY_TEXT + "patch = 4\n")
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "d.ovnt")]) == 2
    assert "'patch'" in capsys.readouterr().err


def test_train_unknown_key(tmp_path, data_dir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 3\n")
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "d.ovnt")]) == 2


def test_train_tiny_run(tmp_path, data_dir, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_TEXT)
    out = tmp_path / "t.ovnt"
    before = {p.name: p.read_bytes() for p in data_dir.iterdir()}
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out), "--seed", "5"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    assert lines[0] == "step\tlr\tloss"
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["0", "2"]
    assert "seed = 5  (flag)" in captured.err and "patch = 8  (file)" in captured.err
    assert "lr0 = 0.001  (default)" in captured.err
    ck = load_checkpoint(out)
    assert ck.model == TINY and ck.step_count == 3
    assert {p.name: p.read_bytes() for p in data_dir.iterdir()} == before


def test_train_flags_override_file(tmp_path, data_dir):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_TEXT)
    out = tmp_path / "t.ovnt"
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out), "--iters", "1"]) == 0
    assert load_checkpoint(out).step_count == 1


def test_train_data_errors(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_TEXT)
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--config", str(cfg), "--data", str(empty), "--out", str(tmp_path / "x.ovnt")]) == 3


# --- sr --------------------------------------------------------------------------------


@pytest.mark.parametrize("scale", ["1.5", "2", "3", "4"])
def test_sr_zero_model_is_bicubic(tmp_path, zero_ckpt, scale):
    src = _png(tmp_path / "in.png", 30, 26, seed=4)
    out = tmp_path / "out.png"
    assert main(["sr", "--ckpt", str(zero_ckpt), "--in", str(src), "--scale", scale, "--out", str(out)]) == 0
    got = png_read(out)
    lr = png_read(src)
    ref = bicubic_resize(lr.astype(np.float64), got.shape[1], got.shape[2])
    assert np.abs(got - ref).max() <= 1 / 255


@pytest.mark.parametrize("shape, scale, expect", [((32, 48), "2", (64, 96)), ((40, 40), "2.5", (100, 100))])
def test_sr_output_sizes(tmp_path, rand_ckpt, shape, scale, expect, capsys):
    src = _png(tmp_path / "in.png", *shape)
    out = tmp_path / "out.png"
    assert main(["sr", "--ckpt", str(rand_ckpt), "--in", str(src), "--scale", scale, "--out", str(out)]) == 0
    assert png_read(out).shape[1:] == expect
    assert capsys.readouterr().out.strip().endswith(f"{expect[1]}x{expect[0]}")


def test_sr_scale_overflow(tmp_path, zero_ckpt, capsys):
    src = _png(tmp_path / "in.png", 10, 10)
    code = main(["sr", "--ckpt", str(zero_ckpt), "--in", str(src), "--scale", "5", "--out", str(tmp_path / "o.png")])
    assert code == 5
    assert "exceeds" in capsys.readouterr().err


def test_sr_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.ovnt"
    bad.write_bytes(b"nonsense")
    src = _png(tmp_path / "in.png", 10, 10)
    assert main(["sr", "--ckpt", str(bad), "--in", str(src), "--scale", "2", "--out", str(tmp_path / "o.png")]) == 3


def test_sr_rejects_bad_scale_text(tmp_path, zero_ckpt):
    with pytest.raises(SystemExit) as info:
        main(["sr", "--ckpt", str(zero_ckpt), "--in", "x.png", "--scale", "abc", "--out", "y.png"])
    assert info.value.code == 2


# --- eval / degrade ---------------------------------------------------------------------------


def test_eval_zero_model_matches_baseline(tmp_path, data_dir, zero_ckpt, capsys):
    rec = tmp_path / "rec.tsv"
    assert main(["eval", "--ckpt", str(zero_ckpt), "--data", str(data_dir), "--scales", "2,3,4",
                 "--records", str(rec)]) == 0
    assert "mean" in capsys.readouterr().out
    lines = rec.read_text().splitlines()
    model = [ln for ln in lines if not ln.startswith("bicubic:")]
    base = [ln[len("bicubic:"):] for ln in lines if ln.startswith("bicubic:")]
    assert len(model) == 6 and model == base


def test_eval_records_deterministic(data_dir, rand_ckpt, capsys):
    args = ["eval", "--ckpt", str(rand_ckpt), "--data", str(data_dir), "--kind", "DN", "--noise", "10",
            "--format", "records", "--seed", "2"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_eval_scale_overflow(data_dir, zero_ckpt):
    assert main(["eval", "--ckpt", str(zero_ckpt), "--data", str(data_dir), "--scales", "2,6"]) == 5


def test_degrade_dn_zero_noise_equals_bi(tmp_path):
    src = _png(tmp_path / "hr.png", 48, 40)
    bi, dn = tmp_path / "bi.png", tmp_path / "dn.png"
    assert main(["degrade", "--in", str(src), "--out", str(bi), "--kind", "BI", "--scale", "4"]) == 0
    assert main(["degrade", "--in", str(src), "--out", str(dn), "--kind", "DN", "--noise", "0", "--scale", "4"]) == 0
    assert bi.read_bytes() == dn.read_bytes()
    assert png_read(bi).shape == (3, 12, 10)


def test_degrade_directory_default_cache(tmp_path, data_dir, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["degrade", "--in", str(data_dir), "--kind", "BD"]) == 0
    out = sorted(p.name for p in (tmp_path / "cache" / "BD_x3").iterdir())
    assert out == ["one.png", "two.png"]


def test_degrade_refuses_to_overwrite_source(tmp_path):
    src = _png(tmp_path / "hr.png", 32, 32)
    before = src.read_bytes()
    assert main(["degrade", "--in", str(src), "--out", str(src), "--scale", "2"]) != 0
    assert src.read_bytes() == before


# --- gradcheck / inspect -------------------------------------------------------------------------


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    worst = float(out.strip().splitlines()[-1].split("\t")[1])
    assert worst <= 1e-4
    assert "overnet_tiny" in out and "conv3x3" in out


def test_gradcheck_tolerance_failure():
    assert main(["gradcheck", "--seeds", "1", "--tol", "1e-12"]) == 1


def test_inspect_prints_param_count(rand_ckpt, capsys):
    assert main(["inspect", "--ckpt", str(rand_ckpt)]) == 0
    out = capsys.readouterr().out
    assert f"param_count = {param_count(TINY)}" in out
    assert f"stored_scalars = {param_count(TINY)}" in out
    assert "base_channels = 16" in out


def test_module_entry_point(rand_ckpt):
    proc = subprocess.run([sys.executable, "-m", "overnet", "inspect", "--ckpt", str(rand_ckpt)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "param_count" in proc.stdout
