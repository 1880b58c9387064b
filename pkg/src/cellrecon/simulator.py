"""Synthetic sweeps with known ground truth.

Scenes are unions of analytic primitives (wires and axis-aligned boxes) over a
background, optionally modulated by a smooth speckle texture.  Frames are
rendered by integrating the scene across the slice thickness with a Gaussian
elevation profile, using dense midpoint quadrature along each pixel's normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .geometry import RigidPose, so3_exp
from .sequence import FrameSequence


@dataclass(frozen=True)
class Wire:
    point: tuple[float, float, float]
    direction: tuple[float, float, float]
    radius: float
    intensity: float = 1.0

    def contains(self, p: np.ndarray) -> np.ndarray:
        d = np.asarray(self.direction, float)
        d = d / np.linalg.norm(d)
        rel = p - np.asarray(self.point, float)
        perp = rel - (rel @ d)[..., None] * d
        return (perp * perp).sum(-1) <= self.radius**2


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    intensity: float = 0.5

    def contains(self, p: np.ndarray) -> np.ndarray:
        # closed box: points on a face are inside
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)


@dataclass(frozen=True)
class Speckle:
    """Unit-variance Gaussian-correlated texture built from random cosines."""

    amplitude: float = 0.2
    correlation_length: float = 0.5
    seed: int = 0
    n_waves: int = 64

    def waves(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        k = rng.normal(0.0, 1.0 / self.correlation_length, (self.n_waves, 3))
        phase = rng.uniform(0.0, 2 * np.pi, self.n_waves)
        return k, phase

    def noise(self, p: np.ndarray) -> np.ndarray:
        k, phase = self.waves()
        return math.sqrt(2.0 / self.n_waves) * np.cos(p @ k.T + phase).sum(-1)


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    background: float = 0.1
    speckle: Speckle | None = None

    def __post_init__(self):
        vals = [self.background] + [p.intensity for p in self.primitives]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("scene intensities must lie in [0, 1]")


def scene_intensity(points, scene: Scene) -> np.ndarray:
    """Analytic scatter intensity at ``(..., 3)`` world points."""
    p = np.asarray(points, dtype=float)
    out = np.full(p.shape[:-1], scene.background, dtype=float)
    for prim in scene.primitives:
        out = np.where(prim.contains(p), np.maximum(out, prim.intensity), out)
    if scene.speckle is not None:
        out = np.clip(out * (1.0 + scene.speckle.amplitude * scene.speckle.noise(p)), 0.0, 1.0)
    return out


@dataclass(frozen=True)
class SweepSpec:
    """A straight sweep: frame ``i`` sits at ``origin + i * step * n``.

    ``orientation`` holds the image axes as columns ``(u, v, n)``.
    """

    n_frames: int = 64
    width: int = 96
    height: int = 96
    d_pixel: float = 0.2
    step: float = 0.3
    slice_thickness: float = 3.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    render_sigma: float | None = None  # None -> slice_thickness / 4
    quadrature_points: int = 64
    intensity_noise: float = 0.0

    def __post_init__(self):
        if self.step <= 0 or self.n_frames < 2:
            raise ValueError("need step > 0 and n_frames >= 2")

    @property
    def sigma(self) -> float:
        return self.render_sigma if self.render_sigma is not None else self.slice_thickness / 4.0

    def rotation(self) -> np.ndarray:
        R = np.asarray(self.orientation, dtype=float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("orientation must be a proper rotation")
        return R

    def poses(self) -> list[RigidPose]:
        R = self.rotation()
        o = np.asarray(self.origin, dtype=float)
        return [RigidPose(R, o + i * self.step * R[:, 2]) for i in range(self.n_frames)]


@dataclass(frozen=True)
class NoiseSpec:
    translation_std: float = 0.0  # mm, per axis
    rotation_std_deg: float = 0.0  # deg, per axis
    drift_amplitude: float = 0.0  # mm, along each frame's normal
    drift_wavelength: float = 50.0  # frames
    seed: int = 0

    def __post_init__(self):
        if min(self.translation_std, self.rotation_std_deg, self.drift_amplitude) < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.drift_wavelength <= 0:
            raise ValueError("drift_wavelength must be positive")


NOISE_PRESETS = {
    "none": NoiseSpec(),
    "light": NoiseSpec(translation_std=0.2, rotation_std_deg=0.1, drift_amplitude=0.0, drift_wavelength=16.0),
    "heavy": NoiseSpec(translation_std=0.8, rotation_std_deg=0.4, drift_amplitude=1.0, drift_wavelength=16.0),
}


def noise_preset(name: str, seed: int = 0) -> NoiseSpec:
    try:
        base = NOISE_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown noise preset {name!r}; choose from {sorted(NOISE_PRESETS)}") from None
    return NoiseSpec(base.translation_std, base.rotation_std_deg, base.drift_amplitude, base.drift_wavelength, seed)


def elevation_quadrature(slice_thickness: float, sigma: float, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint nodes across the slice and their normalised Gaussian weights."""
    s = -slice_thickness / 2.0 + (np.arange(n) + 0.5) * slice_thickness / n
    w = np.exp(-s * s / (2.0 * sigma**2))
    return s, w / w.sum()


def _pack(scene: Scene):
    wires = [p for p in scene.primitives if isinstance(p, Wire)]
    boxes = [p for p in scene.primitives if isinstance(p, Box)]
    if len(wires) + len(boxes) != len(scene.primitives):
        raise TypeError("unsupported primitive type")
    wa = np.zeros((len(wires), 8))
    for i, wr in enumerate(wires):
        d = np.asarray(wr.direction, float)
        wa[i] = [*wr.point, *(d / np.linalg.norm(d)), wr.radius**2, wr.intensity]
    ba = np.array([[*b.lo, *b.hi, b.intensity] for b in boxes], float).reshape(-1, 7)
    if scene.speckle is not None:
        k, phase = scene.speckle.waves()
        amp = scene.speckle.amplitude * math.sqrt(2.0 / scene.speckle.n_waves)
    else:
        k, phase, amp = np.zeros((0, 3)), np.zeros(0), 0.0
    return wa, ba, k, phase, amp


@nb.njit(cache=True)
def _blur_kernel(pts, normal, s, w, background, wires, boxes, k, phase, amp):
    M = k.shape[0]
    # cos(a + s_q kn) = cos(a) cos(s_q kn) - sin(a) sin(s_q kn), with kn = k . normal
    cq = np.empty((s.shape[0], M))
    sq = np.empty((s.shape[0], M))
    for q in range(s.shape[0]):
        for m in range(M):
            t = s[q] * (k[m, 0] * normal[0] + k[m, 1] * normal[1] + k[m, 2] * normal[2])
            cq[q, m] = math.cos(t)
            sq[q, m] = math.sin(t)
    ca = np.empty(M)
    sa = np.empty(M)
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        for m in range(M):
            a = pts[i, 0] * k[m, 0] + pts[i, 1] * k[m, 1] + pts[i, 2] * k[m, 2] + phase[m]
            ca[m] = math.cos(a)
            sa[m] = math.sin(a)
        acc = 0.0
        for q in range(s.shape[0]):
            x = pts[i, 0] + s[q] * normal[0]
            y = pts[i, 1] + s[q] * normal[1]
            z = pts[i, 2] + s[q] * normal[2]
            v = background
            for j in range(wires.shape[0]):
                rx = x - wires[j, 0]
                ry = y - wires[j, 1]
                rz = z - wires[j, 2]
                a = rx * wires[j, 3] + ry * wires[j, 4] + rz * wires[j, 5]
                px = rx - a * wires[j, 3]
                py = ry - a * wires[j, 4]
                pz = rz - a * wires[j, 5]
                if px * px + py * py + pz * pz <= wires[j, 6] and wires[j, 7] > v:
                    v = wires[j, 7]
            for j in range(boxes.shape[0]):
                if (boxes[j, 0] <= x <= boxes[j, 3] and boxes[j, 1] <= y <= boxes[j, 4]
                        and boxes[j, 2] <= z <= boxes[j, 5] and boxes[j, 6] > v):
                    v = boxes[j, 6]
            if M:
                nz = 0.0
                for m in range(M):
                    nz += ca[m] * cq[q, m] - sa[m] * sq[q, m]
                v = min(max(v * (1.0 + amp * nz), 0.0), 1.0)
            acc += w[q] * v
        out[i] = acc
    return out


def blur_along_normal(points, normal, scene: Scene, slice_thickness: float, sigma: float,
                      n: int = 64) -> np.ndarray:
    """Scene integrated across the slice around each point, for one normal.

    Compiled; :func:`blur_along_normal_reference` is the plain numpy version.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    s, w = elevation_quadrature(slice_thickness, sigma, n)
    out = _blur_kernel(pts, np.asarray(normal, dtype=float), s, w, float(scene.background), *_pack(scene))
    return out.reshape(np.asarray(points).shape[:-1])


def blur_along_normal_reference(points, normal, scene: Scene, slice_thickness: float, sigma: float,
                                n: int = 64, chunk: int = 1 << 14) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    s, w = elevation_quadrature(slice_thickness, sigma, n)
    offs = s[:, None] * np.asarray(normal, dtype=float)
    out = np.empty(pts.shape[0])
    for i in range(0, pts.shape[0], chunk):
        block = pts[i:i + chunk, None, :] + offs
        out[i:i + chunk] = scene_intensity(block, scene) @ w
    return out.reshape(np.asarray(points).shape[:-1])


def render_sweep(scene: Scene, sweep: SweepSpec, rng: np.random.Generator | None = None) -> FrameSequence:
    """Render every frame of ``sweep`` with its ground-truth pose.

    ``rng`` is only used when ``sweep.intensity_noise > 0``.
    """
    poses = sweep.poses()
    H, W = sweep.height, sweep.width
    h, w = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    local = np.stack([w * sweep.d_pixel, h * sweep.d_pixel, np.zeros_like(w, dtype=float)], -1)
    images = np.empty((sweep.n_frames, H, W))
    for i, pose in enumerate(poses):
        world = pose.apply(local.reshape(-1, 3))
        images[i] = blur_along_normal(world, pose.rotation[:, 2], scene, sweep.slice_thickness,
                                      sweep.sigma, sweep.quadrature_points).reshape(H, W)
    if sweep.intensity_noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        images = np.clip(images + rng.normal(0.0, sweep.intensity_noise, images.shape), 0.0, 1.0)
    return FrameSequence(images, list(poses), sweep.d_pixel, sweep.slice_thickness,
                         true_poses=list(poses), metadata={"render_sigma": sweep.sigma})


def corrupt_poses(poses: list[RigidPose], noise: NoiseSpec) -> list[RigidPose]:
    """Tracker-like corruption: independent Gaussian jitter on every axis plus
    a sinusoidal drift along each frame's normal."""
    rng = np.random.default_rng(noise.seed)
    n = len(poses)
    dt = rng.normal(0.0, 1.0, (n, 3)) * noise.translation_std
    dr = rng.normal(0.0, 1.0, (n, 3)) * math.radians(noise.rotation_std_deg)
    drift = noise.drift_amplitude * np.sin(2 * np.pi * np.arange(n) / noise.drift_wavelength)
    out = []
    for i, p in enumerate(poses):
        if noise.translation_std == 0 and noise.rotation_std_deg == 0 and noise.drift_amplitude == 0:
            out.append(RigidPose(p.rotation.copy(), p.translation.copy()))
            continue
        R = so3_exp(dr[i]) @ p.rotation
        t = p.translation + dt[i] + drift[i] * p.rotation[:, 2]
        out.append(RigidPose(R, t))
    return out


# ---------------------------------------------------------------------------
# reference phantom


def phantom_scene(speckle: Speckle | None = None) -> Scene:
    """A studded brick and a slanted wire inside a ~19 mm cube.

    The studs give the scene structure along the sweep axis.  The wire sits in
    the upper part of the image (small ``y``) and never meets the brick, so an
    axis-aligned box around it isolates the wire for line fitting (see
    :data:`PHANTOM_WIRE_BOX`).
    """
    prims = [
        Wire(point=(7.0, 4.5, 9.5), direction=(0.4, 0.25, 1.0), radius=0.45, intensity=1.0),
        Box(lo=(2.0, 12.0, 2.5), hi=(17.0, 17.0, 16.5), intensity=0.55),
    ]
    for x0 in (2.75, 5.75, 8.75, 11.75, 14.75):
        for z0 in (3.25, 6.25, 9.25, 12.25, 15.25):
            prims.append(Box(lo=(x0, 10.8, z0), hi=(x0 + 1.5, 12.0, z0 + 1.5), intensity=0.8))
    return Scene(tuple(prims), background=0.1, speckle=speckle)


# (lo, hi) corners in mm of a box holding the phantom wire and nothing else
PHANTOM_WIRE_BOX = ((1.0, 1.0, 0.0), (13.0, 9.0, 19.0))


def phantom_sweep(n_frames: int = 64, size: int = 96, fov: float = 19.0, **kw) -> SweepSpec:
    """Sweep along +z covering the phantom with ``size`` x ``size`` frames."""
    d_pixel = fov / size
    step = kw.pop("step", fov / n_frames)
    return SweepSpec(n_frames=n_frames, width=size, height=size, d_pixel=d_pixel, step=step, **kw)


def blurred_reference(scene: Scene, grid, normal=(0.0, 0.0, 1.0), slice_thickness: float = 3.0,
                      sigma: float | None = None, n: int = 64):
    """The scene as the frames see it: blurred across the slice along ``normal``,
    sampled at the voxel centres of ``grid`` (a :class:`~cellrecon.recon.GridSpec`)."""
    from .recon import VolumeGrid

    sigma = slice_thickness / 4.0 if sigma is None else sigma
    data = blur_along_normal(grid.centers(), normal, scene, slice_thickness, sigma, n)
    return VolumeGrid(grid, data)


def sweep_interior_box(sequence: FrameSequence) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box that every frame's pixels span and that stays half a
    slice inside the first and last frame along a straight sweep."""
    pts = np.stack([p.apply(sequence.local_pixel_grid()) for p in (sequence.poses[0], sequence.poses[-1])])
    lo = pts.min(axis=(0, 1))
    hi = pts.max(axis=(0, 1))
    n = sequence.poses[0].rotation[:, 2]
    inset = np.abs(n) * sequence.slice_thickness / 2.0
    return lo + inset, hi - inset
