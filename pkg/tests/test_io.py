import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from cellrecon.field import HashEncodingConfig, ImplicitField, MlpConfig, field_eval
from cellrecon.geometry import RigidPose
from cellrecon.io import (FormatError, load_checkpoint, parse_run_config, read_bundle, read_metrics, read_poses,
                          read_trace, read_volume, run_config_to_ini, save_checkpoint, write_bundle, write_metrics,
                          write_poses, write_trace, write_volume)
from cellrecon.presets import preset
from cellrecon.recon import GridSpec, VolumeGrid
from cellrecon.simulator import noise_preset, corrupt_poses, phantom_scene, phantom_sweep, render_sweep
from cellrecon.training import EpochRecord


@pytest.fixture(scope="module")
def sequence():
    seq = render_sweep(phantom_scene(), phantom_sweep(5, 8))
    return seq.with_poses(corrupt_poses(seq.poses, noise_preset("heavy", 2)))


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_pose_csv_round_trip(tmp_path_factory, seed, t):
    pose = RigidPose(Rotation.random(random_state=seed).as_matrix(), np.array(t))
    path = tmp_path_factory.mktemp("p") / "poses.csv"
    write_poses(path, [pose, pose])
    back = read_poses(path)
    assert len(back) == 2
    np.testing.assert_allclose(back[0].rotation, pose.rotation, atol=1e-12)
    np.testing.assert_array_equal(back[0].translation, pose.translation)


def test_pose_csv_rejects_non_unit_quaternion(tmp_path):
    p = tmp_path / "poses.csv"
    p.write_text("index,qw,qx,qy,qz,tx,ty,tz\n0,1.0,0.1,0,0,0,0,0\n")
    with pytest.raises(ValueError):
        read_poses(p)


def test_bundle_round_trip(tmp_path, sequence):
    write_bundle(tmp_path / "b", sequence)
    back = read_bundle(tmp_path / "b")
    np.testing.assert_array_equal(back.images, sequence.images.astype(np.float32))
    for p, q in zip(back.poses, sequence.poses):
        np.testing.assert_allclose(p.rotation, q.rotation, atol=1e-12)
        np.testing.assert_array_equal(p.translation, q.translation)
    assert back.true_poses is not None and back.d_pixel == sequence.d_pixel


def test_bundle_checksum_and_truncation(tmp_path, sequence):
    d = write_bundle(tmp_path / "b", sequence)
    raw = bytearray((d / "frames.bin").read_bytes())
    raw[10] ^= 0xFF
    (d / "frames.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        read_bundle(d)
    (d / "frames.bin").write_bytes(bytes(raw[:-4]))
    with pytest.raises(FormatError, match="expected"):
        read_bundle(d)
    with pytest.raises(FormatError):
        read_bundle(tmp_path / "missing")


def test_run_config_round_trip():
    cfg = preset("small", seed=3)
    text = run_config_to_ini(cfg)
    back = parse_run_config(text)
    assert back == cfg
    assert run_config_to_ini(back) == text


def test_run_config_rejects_unknown_keys():
    with pytest.raises(FormatError):
        parse_run_config("[train]\nepochz = 3\n")
    with pytest.raises(FormatError):
        parse_run_config("[nonsense]\nx = 1\n")


def test_checkpoint_round_trip(tmp_path):
    enc = HashEncodingConfig(num_levels=3, table_size_log2=6, base_resolution=4, domain_max=(2.0, 2.0, 2.0))
    f = ImplicitField(enc, MlpConfig(hidden_layers=1, hidden_dim=8), seed=4)
    params = np.random.default_rng(0).normal(size=(5, 6))
    save_checkpoint(tmp_path / "c.bin", f, params, extra={"note": "x"})
    g, p, header = load_checkpoint(tmp_path / "c.bin")
    np.testing.assert_array_equal(p, params)
    x = torch.rand(50, 3, dtype=torch.float64) * 2
    assert torch.equal(field_eval(x, f), field_eval(x, g))
    assert header["extra"] == {"note": "x"}
    data = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-16])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"garbage" + data)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.bin")


def test_volume_round_trip(tmp_path):
    g = GridSpec((0.5, -1.0, 2.0), (0.2, 0.2, 0.2), (3, 4, 5))
    v = VolumeGrid(g, np.arange(60, dtype=float).reshape(3, 4, 5) / 60)
    write_volume(tmp_path / "v.raw", v)
    back = read_volume(tmp_path / "v.raw")
    assert back.grid == g
    np.testing.assert_array_equal(back.data, v.data.astype(np.float32))
    # C order with z fastest
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<f4")
    assert raw[1] == np.float32(v.data[0, 0, 1])


def test_metrics_and_trace(tmp_path):
    write_metrics(tmp_path / "m.csv", {"lfe_mm": 0.25, "psnr_db": 24.5})
    assert read_metrics(tmp_path / "m.csv") == {"lfe_mm": 0.25, "psnr_db": 24.5}
    rec = EpochRecord(0, 3, 4, 0.01, 0.0, 0.0, 0.001, 0.011, 0.2, 0.01, 1.5)
    write_trace(tmp_path / "t.csv", [rec])
    rows = read_trace(tmp_path / "t.csv")
    assert rows[0]["K"] == 3 and rows[0]["l_i"] == 0.01
