import subprocess
import sys

import numpy as np
import pytest

from cellrecon import io as cio
from cellrecon.cli import main
from cellrecon.recon import pose_error


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def noiseless(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "clean"
    assert run("simulate", "--seed", 1, "--noise-preset", "none", "--n-frames", 8, "--size", 16, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def noisy(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "noisy"
    assert run("simulate", "--seed", 2, "--noise-preset", "heavy", "--n-frames", 8, "--size", 16, "--out", d) == 0
    return d


def test_zero_noise_pose_error_is_zero(noiseless, tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert run("evaluate", "--poses", noiseless / "poses.csv", "--true-poses", noiseless / "truth_poses.csv",
               "--out", out) == 0
    m = cio.read_metrics(out)
    assert m["translation_error_mm"] == 0.0 and m["rotation_error_deg"] == 0.0


def test_frozen_poses_keep_initial_error(noisy, tmp_path):
    out = tmp_path / "run"
    assert run("train", noisy, "--epochs", 1, "--ablate", "pose_refinement", "--out", out) == 0
    seq = cio.read_bundle(noisy)
    refined = cio.read_poses(out / "refined_poses.csv")
    assert pose_error(refined, seq.true_poses) == pose_error(seq.poses, seq.true_poses)
    assert (out / "checkpoint.bin").exists() and len(cio.read_trace(out / "loss_trace.csv")) == 1


def test_train_reconstruct_evaluate(noiseless, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert run("train", noiseless, "--epochs", 2, "--out", run_dir) == 0
    vol = tmp_path / "vol.raw"
    assert run("reconstruct", "--checkpoint", run_dir / "checkpoint.bin", "--grid-like",
               noiseless / "reference.raw", "--out", vol) == 0
    assert cio.read_volume(vol).grid == cio.read_volume(noiseless / "reference.raw").grid
    vnn = tmp_path / "vnn.raw"
    assert run("reconstruct", "--bundle", noiseless, "--out", tmp_path / "own.raw") == 0
    capsys.readouterr()
    assert run("evaluate", "--volume", tmp_path / "own.raw", "--reference", noiseless / "reference.raw") == 1
    assert "--grid-like" in capsys.readouterr().err
    assert run("reconstruct", "--bundle", noiseless, "--grid-like", noiseless / "reference.raw", "--out", vnn) == 0
    capsys.readouterr()
    assert run("evaluate", "--volume", vnn, "--reference", noiseless / "reference.raw") == 0
    text = capsys.readouterr().out
    assert "lfe_mm" in text and "psnr_db" in text and "pearson_r" in text


@pytest.mark.parametrize("argv", [
    ["train", "/nonexistent/bundle", "--out", "/tmp/x"],
    ["reconstruct", "--out", "/tmp/x.raw"],
    ["evaluate"],
    ["evaluate", "--poses", "/nonexistent.csv"],
])
def test_errors_exit_nonzero(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_bad_ablation_name(noiseless, tmp_path, capsys):
    assert run("train", noiseless, "--ablate", "poses", "--out", tmp_path / "r") == 1
    assert "unknown ablation" in capsys.readouterr().err


def test_console_entry_point_exit_status(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cellrecon.cli", "evaluate"], capture_output=True, text=True)
    assert r.returncode == 1 and r.stderr.startswith("error:")
    r = subprocess.run([sys.executable, "-m", "cellrecon.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "train", "reconstruct", "evaluate", "ablate"):
        assert cmd in r.stdout


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--seed", 7, "--noise-preset", "light", "--n-frames", 4, "--size", 8,
                   "--out", tmp_path / name) == 0
    a, b = (cio.read_bundle(tmp_path / n) for n in "ab")
    assert np.array_equal(a.images, b.images)
    assert all(np.array_equal(p.translation, q.translation) for p, q in zip(a.poses, b.poses))
