import colorsys
import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from rc3d import ops
from rc3d.cli import RunConfig, main
from rc3d.datagen import load_manifest
from rc3d.models import ConfigError

SMALL_MODEL = ["frame_size=16", "head_width=32"]


def run(command, *sets):
    return main([command] + [a for s in sets for a in ("--set", s)])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-data", "seed=5", f"output={data}", "samples_per_class=2", "render_size=32",
               "valid_fraction=0.5") == 0
    return root, data


@pytest.fixture(scope="module")
def gan_dir(workspace):
    root, data = workspace
    out = root / "gan"
    assert run("train-gan", "seed=2", f"output={out}", f"dataset={data}", *SMALL_MODEL, "batch_size=8",
               "generator_pretrain_epochs=1", "critic_pretrain_epochs=1", "adversarial_epochs=1") == 0
    return out


@pytest.fixture(scope="module")
def trained(workspace):
    root, data = workspace
    out = root / "train"
    assert run("train", "seed=1", f"output={out}", f"dataset={data}", *SMALL_MODEL, "epochs=2") == 0
    return out


# ---------------------------------------------------------------- config handling

def test_seed_is_required(capsys):
    assert run("gen-data", "output=x") == 2
    err = capsys.readouterr().err.strip()
    assert err == "rc3d: error: config: seed is required; pass --set seed=N"


def test_unknown_key_and_bad_value(capsys, tmp_path):
    assert run("gen-data", "seed=1", f"output={tmp_path}", "epochs=3") == 2
    assert "unknown keys for gen-data: epochs" in capsys.readouterr().err
    assert run("gen-data", "seed=x", f"output={tmp_path}") == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_config_file_and_override(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 3\noutput = out\nsamples_per_class = 4\n")
    cfg = RunConfig.resolve("gen-data", str(cfg_file), ["samples_per_class=7"])
    assert cfg["samples_per_class"] == 7 and cfg["seed"] == 3
    assert "seed = 3" in cfg.to_text()
    with pytest.raises(ConfigError):
        RunConfig.resolve("gen-data", str(tmp_path / "missing.cfg"), [])


# ---------------------------------------------------------------- gen-data

def test_gen_data_layout_and_counts(workspace, capsys, tmp_path):
    _, data = workspace
    manifest = load_manifest(data)
    assert len(manifest.entries) == 32
    assert all((data / e.path / "meta.txt").exists() for e in manifest.entries)
    assert "seed = 5" in (data / "config.txt").read_text()
    assert run("gen-data", "seed=1", f"output={tmp_path / 'one'}", "samples_per_class=1",
               "render_size=32") == 0
    out = capsys.readouterr().out
    assert "alarm" in out and "total" in out
    assert len(list((tmp_path / "one").glob("sample_*"))) == 16


def test_gen_data_split_fraction(tmp_path):
    assert run("gen-data", "seed=2", f"output={tmp_path}", "samples_per_class=10", "render_size=32",
               "valid_fraction=0.41") == 0
    assert all(3 <= c <= 5 for c in load_manifest(tmp_path).per_class("valid"))


# ---------------------------------------------------------------- train and eval

def test_train_outputs(trained):
    for name in ("metrics.jsonl", "timings.jsonl", "results.csv", "model.txt", "config.txt",
                 "checkpoint/weights.rc3d", "final/manifest.json"):
        assert (trained / name).exists(), name
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert all("wall_time" not in r for r in records)
    (row,) = read_csv(trained / "results.csv")
    assert float(row["variance"]) == pytest.approx(float(row["training"]) - float(row["validation"]), abs=1e-3)
    assert row["model"].startswith("rc3d")


def test_eval_and_mismatch(trained, workspace, tmp_path, capsys):
    _, data = workspace
    out = tmp_path / "eval"
    assert run("eval", "seed=1", f"output={out}", f"dataset={data}", f"checkpoint={trained}",
               "split=valid") == 0
    (row,) = read_csv(out / "results.csv")
    assert row["split"] == "valid"
    capsys.readouterr()
    assert run("eval", "seed=1", f"output={out}", f"dataset={data}", f"checkpoint={trained}",
               "head_width=64") == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("rc3d: error:") and len(err.splitlines()) == 1


def test_gdepth_needs_generator(workspace, tmp_path, capsys):
    _, data = workspace
    assert run("train", "seed=1", f"output={tmp_path}", f"dataset={data}", *SMALL_MODEL,
               "streams=rgb,gdepth", "epochs=1") == 2
    assert "generator" in capsys.readouterr().err


def test_gan_outputs(gan_dir):
    (row,) = read_csv(gan_dir / "results.csv")
    assert set(row) == {"critic_valid_accuracy", "pretrain_mse", "generator_mse", "mean_depth_mse"}
    for name in ("generator", "generator_pretrained", "critic"):
        assert (gan_dir / name / "weights.rc3d").exists()


def test_depth_trained_net_eval_comparison(workspace, gan_dir, tmp_path):
    _, data = workspace
    train_dir = tmp_path / "train"
    assert run("train", "seed=1", f"output={train_dir}", f"dataset={data}", *SMALL_MODEL,
               "streams=rgb,gdepth", "depth_source=real", "epochs=1") == 0
    out = tmp_path / "eval"
    assert run("eval", "seed=1", f"output={out}", f"dataset={data}", f"checkpoint={train_dir}",
               f"generator={gan_dir}") == 0
    rows = read_csv(out / "results.csv")
    assert [r["depth_source"] for r in rows] == ["real", "generated"]
    assert float(rows[1]["delta_vs_real"]) == pytest.approx(
        float(rows[1]["accuracy"]) - float(rows[0]["accuracy"]), abs=1e-3)


def test_three_stream_training_with_generator(workspace, gan_dir, tmp_path):
    _, data = workspace
    assert run("train", "seed=1", f"output={tmp_path}", f"dataset={data}", *SMALL_MODEL,
               "streams=rgb,gdepth,motion", f"generator={gan_dir}", "epochs=1") == 0
    (row,) = read_csv(tmp_path / "results.csv")
    assert row["model"] == "rc3d[rgb+gdepth+motion]"


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_report(tmp_path, capsys):
    assert run("gradcheck", "seed=0", f"output={tmp_path}", "only=op:softmax") == 0
    lines = (tmp_path / "gradcheck.txt").read_text().splitlines()
    assert lines[0].startswith("PASS  op:softmax") and "max_rel_err=" in lines[0]
    assert lines[-1] == "1/1 passed"


def test_gradcheck_fault_injection(tmp_path, capsys, monkeypatch):
    original = ops.Softmax.backward
    monkeypatch.setattr(ops.Softmax, "backward", staticmethod(lambda ctx, g: tuple(-x for x in original(ctx, g))))
    assert run("gradcheck", "seed=0", f"output={tmp_path}", "only=op:softmax") == 1
    assert "op:softmax" in capsys.readouterr().err


def test_gradcheck_empty_filter(tmp_path):
    assert run("gradcheck", "seed=0", f"output={tmp_path}", "only=nothing-matches") == 2


# ---------------------------------------------------------------- flow-viz

def write_frames(directory, frames):
    directory.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        Image.fromarray(np.round(f * 255).astype(np.uint8), "RGB").save(directory / f"rgb_{k:03d}.png")


def textured(size=48, seed=0):
    img = ndimage.gaussian_filter(np.random.default_rng(seed).random((size, size, 3)), (2, 2, 0), mode="wrap")
    return (img - img.min()) / (img.max() - img.min())


def test_flow_viz_static_clip_is_black(tmp_path):
    frame = textured()
    write_frames(tmp_path / "static", [frame, frame, frame])
    assert run("flow-viz", "seed=0", f"output={tmp_path / 'out'}", f"sample={tmp_path / 'static'}") == 0
    images = sorted((tmp_path / "out").glob("motion_*.png"))
    assert len(images) == 2
    for p in images:
        arr = np.asarray(Image.open(p))
        assert arr.shape == (48, 48, 3) and arr.max() < 40


def test_flow_viz_translation_has_dominant_hue(tmp_path):
    frame = textured(seed=3)
    write_frames(tmp_path / "moving", [frame, np.roll(frame, 2, axis=1)])
    assert run("flow-viz", "seed=0", f"output={tmp_path / 'out'}", f"sample={tmp_path / 'moving'}") == 0
    arr = np.asarray(Image.open(tmp_path / "out" / "motion_000.png")).astype(float) / 255
    inner = arr[10:-10, 10:-10].reshape(-1, 3)
    hues = np.array([colorsys.rgb_to_hsv(*px)[0] for px in inner if max(px) > 0.3])
    hist, _ = np.histogram(hues, bins=12, range=(0, 1))
    assert hist.max() > 0.6 * hist.sum()


def test_flow_viz_needs_frames(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("flow-viz", "seed=0", f"output={tmp_path / 'out'}", f"sample={tmp_path / 'empty'}") == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rc3d.cli", "gen-data", "--set", f"output={tmp_path}"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.strip() == "rc3d: error: config: seed is required; pass --set seed=N"
