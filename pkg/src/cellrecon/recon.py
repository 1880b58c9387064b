"""Volume extraction, the voxel-nearest-neighbour baseline and evaluation metrics.

Volumes are indexed ``data[i, j, k]`` along world ``x, y, z``; voxel ``(i, j, k)``
is centred at ``origin + (i, j, k) * spacing``.  Flattening is C order (``z``
fastest).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from skimage.filters import threshold_otsu

from .field import ImplicitField, field_eval
from .geometry import RigidPose, plane_angle
from .sequence import FrameSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise ValueError("grid spacing must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError("grid dims must be >= 1")

    @classmethod
    def covering(cls, lo, hi, spacing: float = 0.2) -> "GridSpec":
        """Isotropic grid whose voxel centres span the box ``[lo, hi]``."""
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        dims = np.maximum(1, np.floor((hi - lo) / spacing + 1e-9).astype(int) + 1)
        return cls(tuple(lo.tolist()), (spacing,) * 3, tuple(int(d) for d in dims))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def centers(self) -> np.ndarray:
        """``dims + (3,)`` array of voxel centre coordinates."""
        xs, ys, zs = (self.axis_coords(a) for a in range(3))
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), -1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        o = np.asarray(self.origin)
        return o, o + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)


@dataclass
class VolumeGrid:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != tuple(self.grid.dims):
            raise ValueError(f"data shape {self.data.shape} does not match grid dims {self.grid.dims}")


def query_volume(field: ImplicitField, grid: GridSpec) -> VolumeGrid:
    """Evaluate the field at every voxel centre."""
    lo, hi = grid.bounds()
    cfg = field.encoding_config
    if np.any(lo < np.asarray(cfg.domain_min) - 1e-9) or np.any(hi > np.asarray(cfg.domain_max) + 1e-9):
        log.warning("query grid extends outside the field domain; outside points are clamped")
    values = field_eval(grid.centers().reshape(-1, 3), field)
    return VolumeGrid(grid, values.double().numpy().reshape(grid.dims))


def vnn_reconstruct(sequence: FrameSequence, grid: GridSpec,
                    poses: list[RigidPose] | None = None) -> tuple[VolumeGrid, float]:
    """Project every pixel into the voxel containing it and average.

    Returns the volume (unfilled voxels are 0) and the filled fraction.
    """
    poses = sequence.poses if poses is None else poses
    local = sequence.local_pixel_grid()
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)
    dims = np.asarray(grid.dims)
    total = np.zeros(grid.n_voxels)
    count = np.zeros(grid.n_voxels)
    for img, pose in zip(sequence.images, poses):
        ijk = np.rint((pose.apply(local) - origin) / spacing).astype(np.int64)
        ok = np.all((ijk >= 0) & (ijk < dims), axis=1)
        flat = np.ravel_multi_index(ijk[ok].T, grid.dims)
        total += np.bincount(flat, weights=img.ravel()[ok], minlength=grid.n_voxels)
        count += np.bincount(flat, minlength=grid.n_voxels)
    filled = count > 0
    data = np.zeros(grid.n_voxels)
    data[filled] = total[filled] / count[filled]
    return VolumeGrid(grid, data.reshape(grid.dims)), float(filled.mean())


# ---------------------------------------------------------------------------
# line fitting error


@dataclass
class LineFitReport:
    barycenters: np.ndarray  # (n, 3) mm
    point: np.ndarray
    direction: np.ndarray  # unit
    distances: np.ndarray  # (n,) mm
    threshold: float = float("nan")

    @property
    def lfe(self) -> float:
        return float(self.distances.mean())


def fit_line(points) -> tuple[np.ndarray, np.ndarray]:
    """Total-least-squares line: centroid and dominant principal axis."""
    pts = np.asarray(points, dtype=float)
    c = pts.mean(0)
    cov = (pts - c).T @ (pts - c)
    _, vecs = np.linalg.eigh(cov)
    return c, vecs[:, -1]


def line_distances(points, point, direction) -> np.ndarray:
    rel = np.asarray(points, float) - point
    perp = rel - np.outer(rel @ direction, direction)
    return np.linalg.norm(perp, axis=1)


def line_fit_from_barycenters(barycenters) -> LineFitReport:
    pts = np.asarray(barycenters, dtype=float)
    if len(pts) < 3:
        raise ValueError(f"line fit needs at least 3 barycenters, got {len(pts)}")
    c, d = fit_line(pts)
    return LineFitReport(pts, c, d, line_distances(pts, c, d))


def line_fit_error(volume: VolumeGrid, threshold: float | None = None, axis: int = 2,
                   box: tuple | None = None) -> LineFitReport:
    """Wire straightness: threshold, per-slice weighted barycentres, TLS line,
    mean barycentre-to-line distance.

    ``box`` is a world-space ``(lo, hi)`` restricting the wire sub-volume;
    ``threshold`` defaults to Otsu's threshold on that sub-volume; ``axis`` is
    the slicing axis.
    """
    grid = volume.grid
    sl = [slice(None)] * 3
    if box is not None:
        lo, hi = (np.asarray(b, float) for b in box)
        for a in range(3):
            c = grid.axis_coords(a)
            inside = np.nonzero((c >= lo[a] - 1e-9) & (c <= hi[a] + 1e-9))[0]
            if inside.size == 0:
                raise ValueError("wire box does not intersect the volume")
            sl[a] = slice(inside[0], inside[-1] + 1)
    sub = volume.data[tuple(sl)]
    coords = [grid.axis_coords(a)[sl[a]] for a in range(3)]
    if threshold is None:
        threshold = float(threshold_otsu(sub)) if np.ptp(sub) > 0 else float(sub.max())
    bary = []
    moved = np.moveaxis(sub, axis, 0)
    others = [a for a in range(3) if a != axis]
    g0, g1 = np.meshgrid(coords[others[0]], coords[others[1]], indexing="ij")
    for s, plane in zip(coords[axis], moved):
        w = np.where(plane > threshold, plane, 0.0)
        tot = w.sum()
        if tot <= 0:
            continue
        p = np.empty(3)
        p[axis] = s
        p[others[0]] = (w * g0).sum() / tot
        p[others[1]] = (w * g1).sum() / tot
        bary.append(p)
    if len(bary) < 3:
        raise ValueError(f"only {len(bary)} slices contain wire voxels; need at least 3")
    report = line_fit_from_barycenters(np.array(bary))
    report.threshold = threshold
    return report


# ---------------------------------------------------------------------------
# image and pose metrics


def psnr(volume, reference, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical inputs."""
    a = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume, float)
    b = reference.data if isinstance(reference, VolumeGrid) else np.asarray(reference, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def pearson(volume, reference) -> float:
    a = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume, float)
    b = reference.data if isinstance(reference, VolumeGrid) else np.asarray(reference, float)
    return float(np.corrcoef(a.ravel(), b.ravel())[0, 1])


def pose_error(poses: list[RigidPose], true_poses: list[RigidPose]) -> tuple[float, float]:
    """Mean translation error (mm) and mean geodesic rotation error (deg)."""
    if len(poses) != len(true_poses):
        raise ValueError(f"pose count mismatch: {len(poses)} vs {len(true_poses)}")
    dt = [float(np.linalg.norm(a.translation - b.translation)) for a, b in zip(poses, true_poses)]
    dr = [math.degrees(plane_angle(a, b)) for a, b in zip(poses, true_poses)]
    return float(np.mean(dt)), float(np.mean(dr))
