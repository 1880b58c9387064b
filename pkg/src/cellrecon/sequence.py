"""The acquisition record: frames, their poses and the probe geometry."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import RigidPose, stack_poses


@dataclass
class FrameSequence:
    """``N`` grayscale frames of shape ``(H, W)`` with one pose per frame.

    ``poses`` are the tracked (possibly noisy) poses used for reconstruction;
    ``true_poses`` is only populated for simulated data.
    """

    images: np.ndarray
    poses: list[RigidPose]
    d_pixel: float
    slice_thickness: float
    true_poses: list[RigidPose] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError("images must have shape (N, H, W)")
        if len(self.poses) != self.images.shape[0]:
            raise ValueError(f"{len(self.poses)} poses for {self.images.shape[0]} frames")
        if self.true_poses is not None and len(self.true_poses) != len(self.poses):
            raise ValueError("true_poses length must match poses")
        if self.d_pixel <= 0 or self.slice_thickness <= 0:
            raise ValueError("d_pixel and slice_thickness must be positive")

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def stacked_poses(self) -> tuple[np.ndarray, np.ndarray]:
        return stack_poses(self.poses)

    def with_poses(self, poses: list[RigidPose]) -> "FrameSequence":
        return replace(self, poses=list(poses))

    def local_pixel_grid(self) -> np.ndarray:
        """``(H*W, 3)`` image-local pixel positions, row-major (h, w)."""
        H, W = self.shape
        h, w = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        return np.stack([w.ravel() * self.d_pixel, h.ravel() * self.d_pixel, np.zeros(H * W)], -1)

    def world_bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box holding every pixel of every frame, padded by the
        half slice thickness along each normal plus ``margin``."""
        H, W = self.shape
        corners = np.array([[0, 0, 0], [W - 1, 0, 0], [0, H - 1, 0], [W - 1, H - 1, 0]], float) * self.d_pixel
        R, t = self.stacked_poses()
        pts = np.einsum("nij,cj->nci", R, corners) + t[:, None, :]
        half = self.slice_thickness / 2.0
        ext = np.concatenate([pts + half * R[:, None, :, 2], pts - half * R[:, None, :, 2]], 1).reshape(-1, 3)
        return ext.min(0) - margin, ext.max(0) + margin
