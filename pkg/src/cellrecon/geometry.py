"""Rigid-pose algebra, pixel-to-world mapping and inter-frame plane metrics.

Conventions
-----------
A frame's pose maps image-local coordinates to world millimetres.  The image
plane is spanned by the first two rotation columns: ``u`` (column / width
direction) and ``v`` (row / height direction); the normal is ``n = u x v``,
the third column.  Pixel ``(w, h)`` sits at local ``(w * d_pixel, h * d_pixel, 0)``,
so the frame origin is the centre of pixel ``(0, 0)``.

A pose refinement vector ``(omega, tau)`` acts as a left delta on the rotation
and an additive offset on the translation::

    R = Exp(omega) @ R0,   t = t0 + tau

The numpy functions are the reference implementation; the ``*_torch`` variants
are batched and differentiable and are used inside the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

SMALL_ANGLE = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator: 3-vector to skew-symmetric matrix."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential with a Taylor fallback near zero."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp` for rotation angles in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * vee
    if math.pi - theta < 1e-6:
        # axis from the symmetric part; sign is irrelevant at pi
        S = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(S), 0.0, None))
        i = int(np.argmax(axis))
        axis = S[:, i] / axis[i]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * math.sin(theta)) * vee


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi].

    Uses ``atan2(|vee|, trace - 1)`` which keeps full precision near 0 and pi,
    unlike ``acos`` of the trace.
    """
    R = np.asarray(R, dtype=float)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(float(np.linalg.norm(vee)), float(np.trace(R) - 1.0))


@dataclass(frozen=True)
class RigidPose:
    """Element of SE(3): ``x_world = rotation @ x_local + translation`` (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self @ other`` (apply ``other`` first)."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, atol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=atol) and abs(np.linalg.det(R) - 1.0) < atol)


@dataclass(frozen=True)
class PoseParam:
    """Six-vector refinement of an initial pose: rotation algebra ``omega`` (rad)
    and translation offset ``tau`` (mm)."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega", np.array(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "tau", np.array(self.tau, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, v) -> "PoseParam":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.tau])


def exp_map(param: PoseParam, base: RigidPose) -> RigidPose:
    """Refined pose ``(Exp(omega) @ R0, t0 + tau)``."""
    return RigidPose(so3_exp(param.omega) @ base.rotation, base.translation + param.tau)


def log_map(pose: RigidPose, base: RigidPose) -> PoseParam:
    """The :class:`PoseParam` taking ``base`` to ``pose`` under :func:`exp_map`."""
    return PoseParam(so3_log(pose.rotation @ base.rotation.T), pose.translation - base.translation)


@dataclass(frozen=True)
class FrameGeometry:
    """Image-plane geometry of one frame in world coordinates."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    normal: np.ndarray
    d_pixel: float

    @classmethod
    def from_pose(cls, pose: RigidPose, d_pixel: float) -> "FrameGeometry":
        R = pose.rotation
        return cls(pose.translation.copy(), R[:, 0].copy(), R[:, 1].copy(), R[:, 2].copy(), float(d_pixel))


def pixel_to_world(w, h, pose: RigidPose, d_pixel: float, shape: tuple[int, int] | None = None) -> np.ndarray:
    """World position (mm) of pixel column ``w``, row ``h``.

    ``shape`` is ``(H, W)``; when given, indices outside the image raise
    ``IndexError``.  ``w`` and ``h`` may be arrays of equal shape.
    """
    w = np.asarray(w, dtype=float)
    h = np.asarray(h, dtype=float)
    if shape is not None:
        H, W = shape
        if np.any(w < 0) or np.any(w >= W) or np.any(h < 0) or np.any(h >= H):
            raise IndexError(f"pixel index outside image of shape {shape}")
    local = np.stack([w * d_pixel, h * d_pixel, np.zeros_like(w)], axis=-1)
    return pose.apply(local)


def plane_distance(frame_i: FrameGeometry, frame_j: FrameGeometry) -> float:
    """Normal distance ``|(o_j - o_i) . n_i|`` between two image planes."""
    return abs(float(np.dot(frame_j.origin - frame_i.origin, frame_i.normal)))


def plane_angle(pose_i: RigidPose, pose_j: RigidPose) -> float:
    """Geodesic angle (rad) between two orientations."""
    return rotation_angle(pose_i.rotation.T @ pose_j.rotation)


def adjacent_metrics(poses: list[RigidPose]) -> tuple[np.ndarray, np.ndarray]:
    """Normal distances and angles between consecutive frames (length ``N - 1``)."""
    D = np.array([
        abs(float(np.dot(b.translation - a.translation, a.rotation[:, 2])))
        for a, b in zip(poses[:-1], poses[1:])
    ])
    theta = np.array([plane_angle(a, b) for a, b in zip(poses[:-1], poses[1:])])
    return D, theta


def stack_poses(poses: list[RigidPose]) -> tuple[np.ndarray, np.ndarray]:
    """``(N, 3, 3)`` rotations and ``(N, 3)`` translations."""
    return np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses])


def unstack_poses(R: np.ndarray, t: np.ndarray) -> list[RigidPose]:
    return [RigidPose(r, x) for r, x in zip(R, t)]


# ---------------------------------------------------------------------------
# batched torch versions (differentiable)


def so3_exp_torch(omega: torch.Tensor) -> torch.Tensor:
    """Batched Rodrigues exponential, ``(..., 3) -> (..., 3, 3)``.

    The small-angle branch is selected with ``torch.where`` on a guarded
    angle so that gradients stay finite at exactly zero.
    """
    theta2 = (omega * omega).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    safe = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(safe)) / safe2)
    x, y, z = omega.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def refine_poses_torch(params: torch.Tensor, R0: torch.Tensor, t0: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply ``(N, 6)`` refinement vectors to initial ``(N,3,3)``, ``(N,3)`` poses."""
    return so3_exp_torch(params[:, :3]) @ R0, t0 + params[:, 3:]


def rotation_angle_torch(R: torch.Tensor) -> torch.Tensor:
    vee = torch.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    trace = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    # norm with an epsilon: d|x|/dx is undefined at 0
    s = torch.sqrt((vee * vee).sum(-1) + 1e-30)
    return torch.atan2(s, trace - 1.0)


def adjacent_metrics_torch(R: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable counterpart of :func:`adjacent_metrics`."""
    normals = R[:-1, :, 2]
    D = torch.abs(((t[1:] - t[:-1]) * normals).sum(-1))
    rel = R[:-1].transpose(-1, -2) @ R[1:]
    return D, rotation_angle_torch(rel)
