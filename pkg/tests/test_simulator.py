import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellrecon.geometry import RigidPose, adjacent_metrics
from cellrecon.recon import GridSpec, line_fit_error, vnn_reconstruct
from cellrecon.simulator import (Box, NoiseSpec, Scene, Speckle, SweepSpec, Wire, blur_along_normal,
                                 blur_along_normal_reference, corrupt_poses, elevation_quadrature, noise_preset,
                                 phantom_scene, phantom_sweep, render_sweep, scene_intensity)


def test_containment_conventions():
    s = Scene((Wire((0, 0, 0), (0, 0, 1), 0.5, 0.9), Box((2, 2, 2), (3, 3, 3), 0.6)), background=0.1)
    assert scene_intensity([0.0, 0.0, 7.0], s) == 0.9
    assert scene_intensity([10.0, 10.0, 10.0], s) == 0.1
    assert scene_intensity([3.0, 2.5, 2.5], s) == 0.6  # closed box
    assert scene_intensity([3.0 + 1e-9, 2.5, 2.5], s) == 0.1


def test_scene_rejects_bad_intensity():
    with pytest.raises(ValueError):
        Scene((Box((0, 0, 0), (1, 1, 1), 1.5),))


def test_speckle_unit_variance():
    sp = Speckle(1.0, 0.5, seed=2, n_waves=64)
    x = np.random.default_rng(0).uniform(0, 200, (20000, 3))
    n = sp.noise(x)
    assert abs(n.mean()) < 0.05 and abs(n.var() - 1) < 0.15


def test_quadrature_weights():
    s, w = elevation_quadrature(3.0, 0.75, 64)
    assert len(s) == 64 and abs(w.sum() - 1) < 1e-14
    assert s.min() > -1.5 and s.max() < 1.5
    np.testing.assert_allclose(s, -s[::-1], atol=1e-15)


@given(st.floats(0.0, 1.0))
def test_uniform_scene_renders_constant(c):
    seq = render_sweep(Scene((), background=c), SweepSpec(n_frames=2, width=5, height=4))
    assert np.all(np.abs(seq.images - c) <= 1e-15)


def _scene(speckle):
    return phantom_scene(Speckle(0.3, 1.0, 4) if speckle else None)


@pytest.mark.parametrize("speckle", [False, True])
def test_compiled_blur_matches_reference(speckle, rng):
    scene = _scene(speckle)
    pts = rng.uniform(0, 19, (500, 3))
    n = np.array([0.3, -0.2, 0.9])
    n /= np.linalg.norm(n)
    a = blur_along_normal(pts, n, scene, 3.0, 0.75, 64)
    b = blur_along_normal_reference(pts, n, scene, 3.0, 0.75, 64)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_render_is_deterministic_and_exact_on_trajectory():
    sw = phantom_sweep(6, 12, intensity_noise=0.02)
    a = render_sweep(phantom_scene(), sw, np.random.default_rng(5))
    b = render_sweep(phantom_scene(), sw, np.random.default_rng(5))
    assert np.array_equal(a.images, b.images)
    for p, q in zip(a.poses, sw.poses()):
        assert np.array_equal(p.translation, q.translation)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_perpendicular_wire_is_straight_in_ground_truth_volume():
    scene = Scene((Wire((3.3, 2.7, 0.0), (0, 0, 1), 0.6, 1.0),), background=0.0)
    seq = render_sweep(scene, SweepSpec(n_frames=20, width=30, height=30, d_pixel=0.2, step=0.2))
    vol, _ = vnn_reconstruct(seq, GridSpec((0.0, 0.0, 0.0), (0.2,) * 3, (30, 30, 20)))
    rep = line_fit_error(vol, threshold=0.5)
    assert rep.lfe < 1e-9
    np.testing.assert_allclose(rep.barycenters[:, :2], [[3.3, 2.7]] * len(rep.barycenters), atol=0.05)


def test_halving_pixel_size_doubles_blob_diameter():
    scene = Scene((Wire((3.0, 3.0, 0.0), (0, 0, 1), 1.0, 1.0),), background=0.0)
    def diameter(d, size):
        img = render_sweep(scene, SweepSpec(n_frames=2, width=size, height=size, d_pixel=d)).images[0]
        return (img > 0.5).sum(1).max()
    a = diameter(0.2, 30)
    b = diameter(0.1, 60)
    assert abs(b - 2 * a) <= 1


# -- pose corruption -------------------------------------------------------------


def _line(n, step=0.3):
    return [RigidPose(np.eye(3), np.array([0.0, 0.0, i * step])) for i in range(n)]


def test_zero_noise_is_bit_exact():
    poses = _line(10)
    out = corrupt_poses(poses, NoiseSpec(seed=4))
    for p, q in zip(poses, out):
        assert np.array_equal(p.rotation, q.rotation) and np.array_equal(p.translation, q.translation)
    assert out[0].translation is not poses[0].translation


def test_translation_jitter_statistics():
    poses = _line(10000)
    out = corrupt_poses(poses, NoiseSpec(translation_std=0.5, seed=1))
    d = np.stack([q.translation - p.translation for p, q in zip(poses, out)])
    assert np.all(np.abs(d.std(0) / 0.5 - 1) < 0.05)


def test_drift_respects_derivative_bound():
    poses = _line(200)
    out = corrupt_poses(poses, NoiseSpec(drift_amplitude=1.0, drift_wavelength=50.0))
    D0, _ = adjacent_metrics(poses)
    D1, _ = adjacent_metrics(out)
    dev = np.abs(D1 - D0)
    assert dev.max() <= 2 * math.pi / 50 + 1e-12
    assert dev.max() > 0.9 * 2 * math.pi / 50 * math.cos(math.pi / 50)
    shift = np.array([q.translation[2] - p.translation[2] for p, q in zip(poses, out)])
    assert np.abs(shift).max() <= 1.0 + 1e-12


def test_noise_presets():
    assert noise_preset("heavy", 3).seed == 3
    h = noise_preset("heavy")
    assert (h.translation_std, h.rotation_std_deg, h.drift_amplitude) == (0.8, 0.4, 1.0)
    assert noise_preset("light").drift_amplitude == 0.0
    with pytest.raises(ValueError):
        noise_preset("medium")
    with pytest.raises(ValueError):
        NoiseSpec(translation_std=-1.0)
