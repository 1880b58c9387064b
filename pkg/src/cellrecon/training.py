"""Joint optimisation of the implicit field and per-frame pose refinements.

The objective for a batch of pixels is::

    chi = l_i + beta_D * l_D + beta_theta * l_theta + beta_R * mean(R_V)

with ``l_i`` the intensity MSE, ``l_D`` / ``l_theta`` the worst windowed
violation of adjacent-frame normal distance / angle, and ``R_V`` the weighted
subcell variance.  Window bounds are computed once from the initial poses.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
import torch

from .cell import CellConfig, gaussian_weights, pixel_uniforms, predict_intensity, volume_regularizer
from .field import HashEncodingConfig, ImplicitField, MlpConfig
from .geometry import (RigidPose, adjacent_metrics, adjacent_metrics_torch, refine_poses_torch,
                       unstack_poses)
from .sequence import FrameSequence

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss component becomes NaN or infinite."""


@dataclass
class WindowBounds:
    """Per adjacent pair ``i`` (``N - 1`` of them): allowed normal distance and
    angle intervals."""

    distance_lo: np.ndarray
    distance_hi: np.ndarray
    angle_lo: np.ndarray
    angle_hi: np.ndarray

    def __len__(self):
        return len(self.distance_lo)


@dataclass
class LossWeights:
    distance: float = 0.03
    angle: float = 30.0
    volume: float = 1.0

    def __post_init__(self):
        if min(self.distance, self.angle, self.volume) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class AblationFlags:
    cell_model: bool = True
    pose_refinement: bool = True
    pose_regularization: bool = True
    volume_regularization: bool = True

    @classmethod
    def without(cls, *names: str) -> "AblationFlags":
        flags = cls()
        for n in names:
            if not hasattr(flags, n):
                raise ValueError(f"unknown ablation flag {n!r}")
            setattr(flags, n, False)
        return flags


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4096
    steps_per_epoch: int | None = None  # None -> one full pass over all pixels
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    lr_field_final: float = 1.0  # field learning rates decay exponentially to this fraction
    lr_pose: float = 1e-4  # translation offsets (mm)
    lr_pose_rotation: float = 1e-4  # rotation algebra (rad)
    window: int = 5
    K_ramp_fraction: float = 0.6
    levels_start: int = 4
    levels_ramp_fraction: float = 1.0
    pose_warmup_epochs: int = 0
    seed: int = 0
    cell: CellConfig = dc_field(default_factory=CellConfig)
    encoding: HashEncodingConfig = dc_field(default_factory=HashEncodingConfig)
    mlp: MlpConfig = dc_field(default_factory=MlpConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    flags: AblationFlags = dc_field(default_factory=AblationFlags)
    domain_margin: float = 1.0
    volume_reg_moves_poses: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if min(self.lr_hash, self.lr_mlp, self.lr_pose, self.lr_pose_rotation, self.lr_field_final) <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


# ---------------------------------------------------------------------------
# constraints and penalties


def window_bounds_from_metrics(distances, angles, window: int) -> WindowBounds:
    """Sliding-window min/max of each adjacent metric over ``[i - W, i + W]``,
    truncated to existing pairs."""
    D = np.asarray(distances, dtype=float)
    A = np.asarray(angles, dtype=float)
    n = len(D)
    lo_d, hi_d, lo_a, hi_a = (np.empty(n) for _ in range(4))
    for i in range(n):
        s = slice(max(0, i - window), min(n, i + window + 1))
        lo_d[i], hi_d[i] = D[s].min(), D[s].max()
        lo_a[i], hi_a[i] = A[s].min(), A[s].max()
    return WindowBounds(lo_d, hi_d, lo_a, hi_a)


def compute_window_bounds(initial_poses: list[RigidPose], window: int) -> WindowBounds:
    if len(initial_poses) < 2:
        raise ValueError("window bounds need at least two frames")
    D, A = adjacent_metrics(initial_poses)
    return window_bounds_from_metrics(D, A, window)


def penalty(x, a, b):
    """``max(a - x, x - b, 0) ** 2``; works on scalars, numpy arrays and tensors."""
    if torch.is_tensor(x):
        a = torch.as_tensor(a, dtype=x.dtype)
        b = torch.as_tensor(b, dtype=x.dtype)
        return torch.clamp(torch.maximum(a - x, x - b), min=0.0) ** 2
    return np.maximum(np.maximum(np.subtract(a, x), np.subtract(x, b)), 0.0) ** 2


def pose_regularizers(poses, bounds: WindowBounds):
    """``(l_D, l_theta)``: the largest penalty over adjacent pairs.

    ``poses`` is either a list of :class:`RigidPose` (returns floats) or a
    ``(R, t)`` tensor pair (returns differentiable tensors).
    """
    if isinstance(poses, (list, tuple)) and poses and isinstance(poses[0], RigidPose):
        D, A = adjacent_metrics(list(poses))
        return (float(penalty(D, bounds.distance_lo, bounds.distance_hi).max()),
                float(penalty(A, bounds.angle_lo, bounds.angle_hi).max()))
    R, t = poses
    D, A = adjacent_metrics_torch(R, t)
    return (penalty(D, bounds.distance_lo, bounds.distance_hi).max(),
            penalty(A, bounds.angle_lo, bounds.angle_hi).max())


def intensity_loss(predicted, observed):
    """Mean squared error over the batch."""
    if len(predicted) != len(observed):
        raise ValueError(f"batch length mismatch: {len(predicted)} vs {len(observed)}")
    if torch.is_tensor(predicted):
        observed = torch.as_tensor(observed, dtype=predicted.dtype)
        return ((observed - predicted) ** 2).mean()
    diff = np.asarray(observed, float) - np.asarray(predicted, float)
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# schedules


def K_schedule(epoch: int, epochs: int, K_init: int, K: int, ramp_fraction: float = 0.6) -> int:
    """Ceil of a linear ramp from ``K_init`` (epoch 0) to ``K`` at
    ``ramp_fraction`` of the run, constant afterwards."""
    end = ramp_fraction * (epochs - 1)
    frac = 1.0 if end <= 0 else min(1.0, epoch / end)
    return int(math.ceil(K_init + (K - K_init) * frac - 1e-9))


def levels_schedule(epoch: int, epochs: int, start: int, total: int, ramp_fraction: float = 1.0) -> int:
    """Linear ramp of active hash levels from ``start`` to ``total``, reached at
    ``ramp_fraction`` of the run (1.0: the last epoch)."""
    start = min(max(1, start), total)
    end = ramp_fraction * (epochs - 1)
    frac = 1.0 if end <= 0 else min(1.0, epoch / end)
    return int(round(start + (total - start) * frac))


# ---------------------------------------------------------------------------
# objective


class JointProblem:
    """Tensors and fixed quantities shared by every evaluation of the objective."""

    def __init__(self, sequence: FrameSequence, config: TrainConfig):
        if sequence.n_frames < 2:
            raise ValueError("need at least two frames")
        self.sequence = sequence
        self.config = config
        dt = config.torch_dtype
        N = sequence.n_frames
        self.n_frames = N
        self.n_pixels = sequence.shape[0] * sequence.shape[1]
        self.images = torch.as_tensor(sequence.images.reshape(N, -1), dtype=dt)
        self.local = torch.as_tensor(sequence.local_pixel_grid(), dtype=dt)
        R0, t0 = sequence.stacked_poses()
        self.R0 = torch.as_tensor(R0, dtype=dt)
        self.t0 = torch.as_tensor(t0, dtype=dt)
        self.bounds = compute_window_bounds(sequence.poses, config.window)

    def cell_config(self, K: int) -> CellConfig:
        if not self.config.flags.cell_model:
            return CellConfig(K=1, K_init=1, slice_thickness=self.config.cell.slice_thickness,
                              sigma=self.config.cell.sigma, samples_per_subcell=1)
        return self.config.cell.with_K(K)


@dataclass
class LossTerms:
    total: torch.Tensor
    intensity: torch.Tensor
    distance: torch.Tensor
    angle: torch.Tensor
    volume: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "intensity", "distance", "angle", "volume")}

    def check_finite(self) -> None:
        for name in ("intensity", "distance", "angle", "volume", "total"):
            if not torch.isfinite(getattr(self, name)).item():
                raise NonFiniteLossError(f"non-finite {name} loss term ({float(getattr(self, name).detach())})")


def total_loss(problem: JointProblem, field: ImplicitField, rotation: torch.Tensor, translation: torch.Tensor,
               pixel_indices: np.ndarray, K: int, epoch: int = 0) -> LossTerms:
    """Objective on a batch of flat pixel indices (``frame * H * W + pixel``).

    ``rotation`` / ``translation`` are the ``(N, 3)`` refinement parameters;
    gradients reach them through both the pixel positions and the subcell
    sample positions.
    """
    cfg = problem.config
    flags = cfg.flags
    idx = np.asarray(pixel_indices, dtype=np.int64)
    f = idx // problem.n_pixels
    pix = idx % problem.n_pixels
    ft = torch.as_tensor(f)
    pt = torch.as_tensor(pix)
    R, t = refine_poses_torch(torch.cat([rotation, translation], 1), problem.R0, problem.t0)
    Rf = R[ft]
    points = (Rf @ problem.local[pt][..., None]).squeeze(-1) + t[ft]
    normals = Rf[..., 2]
    cell = problem.cell_config(K)
    if flags.cell_model:
        u = pixel_uniforms(cfg.seed, epoch, f, pix, cell.K, cell.samples_per_subcell)
    else:
        u = np.full((len(idx), 1, 1), 0.5)
    weights = torch.as_tensor(gaussian_weights(cell), dtype=points.dtype)
    g_hat, means = predict_intensity(points, normals, field, cell, u=u, weights=weights)
    observed = problem.images[ft, pt]
    l_i = intensity_loss(g_hat, observed)
    zero = l_i.new_zeros(())
    if flags.volume_regularization and cfg.weights.volume > 0:
        if not cfg.volume_reg_moves_poses and (rotation.requires_grad or translation.requires_grad):
            # same value, but the subcell variance only shapes the field
            _, means_v = predict_intensity(points.detach(), normals.detach(), field, cell, u=u, weights=weights)
            g_v = (means_v * weights).sum(-1)
        else:
            means_v, g_v = means, g_hat
        r_v = volume_regularizer(means_v, weights, g_v).mean()
    else:
        r_v = zero
    if flags.pose_regularization:
        l_d, l_a = pose_regularizers((R, t), problem.bounds)
    else:
        l_d, l_a = zero, zero
    w = cfg.weights
    chi = l_i + w.distance * l_d + w.angle * l_a + w.volume * r_v
    return LossTerms(chi, l_i, l_d, l_a, r_v)


def loss_and_gradients(problem: JointProblem, field: ImplicitField, pose_params: torch.Tensor,
                       pixel_indices, K: int, epoch: int = 0):
    """Objective value with gradients for every field parameter and the
    ``(N, 6)`` pose refinement vectors (rotation first)."""
    p = pose_params.detach().clone().requires_grad_(True)
    terms = total_loss(problem, field, p[:, :3], p[:, 3:], pixel_indices, K, epoch)
    terms.check_finite()
    names, params = zip(*field.named_parameters())
    grads = torch.autograd.grad(terms.total, params + (p,), allow_unused=True)
    field_grads = {n: (g if g is not None else torch.zeros_like(q)) for n, q, g in zip(names, params, grads[:-1])}
    return terms, field_grads, grads[-1]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    K: int
    active_levels: int
    intensity: float
    distance: float
    angle: float
    volume: float
    total: float
    mean_translation_delta: float  # mm
    mean_rotation_delta: float  # deg
    seconds: float


@dataclass
class TrainResult:
    field: ImplicitField
    poses: list[RigidPose]
    pose_params: np.ndarray  # (N, 6): omega, tau
    trace: list[EpochRecord]
    initial_intensity_loss: float
    final_intensity_loss: float
    config: TrainConfig
    bounds: WindowBounds


def field_domain(sequence: FrameSequence, margin: float) -> tuple[tuple, tuple]:
    lo, hi = sequence.world_bounds(margin)
    return tuple(float(x) for x in lo), tuple(float(x) for x in hi)


def build_field(sequence: FrameSequence, config: TrainConfig) -> ImplicitField:
    lo, hi = field_domain(sequence, config.domain_margin)
    enc = replace(config.encoding, domain_min=lo, domain_max=hi, active_levels=None)
    return ImplicitField(enc, replace(config.mlp), seed=config.seed, dtype=config.torch_dtype)


def _steps_per_epoch(total_pixels: int, config: TrainConfig) -> int:
    n = math.ceil(total_pixels / config.batch_size)
    return n if config.steps_per_epoch is None else min(n, config.steps_per_epoch)


def evaluation_pixels(problem: JointProblem, n: int, seed: int) -> np.ndarray:
    total = problem.n_frames * problem.n_pixels
    rng = np.random.default_rng([seed, 0xE7A1])
    return np.sort(rng.choice(total, size=min(n, total), replace=False))


def mean_intensity_loss(problem, field, rotation, translation, indices, K, chunk: int = 8192) -> float:
    """Intensity MSE over ``indices`` evaluated without gradients (epoch 0 samples)."""
    acc = 0.0
    with torch.no_grad():
        for i in range(0, len(indices), chunk):
            block = indices[i:i + chunk]
            terms = total_loss(problem, field, rotation, translation, block, K, epoch=0)
            acc += float(terms.intensity) * len(block)
    return acc / len(indices)


def train(sequence: FrameSequence, config: TrainConfig | None = None, progress: bool = False,
          callback=None) -> TrainResult:
    """Fit the field and refine poses.  Deterministic given ``config.seed`` and
    the torch thread count.

    ``callback(record, field, pose_params)`` is called after every epoch with
    the detached ``(N, 6)`` refinement vectors.
    """
    config = config if config is not None else TrainConfig()
    if sequence.n_frames == 0:
        raise ValueError("empty sequence")
    problem = JointProblem(sequence, config)
    field = build_field(sequence, config)
    dt = config.torch_dtype
    N = sequence.n_frames
    rotation = torch.zeros(N, 3, dtype=dt, requires_grad=config.flags.pose_refinement)
    translation = torch.zeros(N, 3, dtype=dt, requires_grad=config.flags.pose_refinement)

    field_opt = torch.optim.Adam([
        {"params": field.hash_parameters(), "lr": config.lr_hash},
        {"params": field.mlp_parameters(), "lr": config.lr_mlp},
    ])
    pose_opt = None
    if config.flags.pose_refinement:
        pose_opt = torch.optim.Adam([
            {"params": [rotation], "lr": config.lr_pose_rotation},
            {"params": [translation], "lr": config.lr_pose},
        ])

    eval_idx = evaluation_pixels(problem, 16384, config.seed)
    L = config.encoding.num_levels
    K0 = config.cell.K_init
    field.set_active_levels(levels_schedule(0, config.epochs, config.levels_start, L, config.levels_ramp_fraction))
    initial_li = mean_intensity_loss(problem, field, rotation, translation, eval_idx, config.cell.K)

    total_pixels = N * problem.n_pixels
    steps_total = config.epochs * _steps_per_epoch(total_pixels, config)
    field_sched = torch.optim.lr_scheduler.ExponentialLR(
        field_opt, gamma=config.lr_field_final ** (1.0 / max(1, steps_total - 1)))
    trace: list[EpochRecord] = []
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        K = K_schedule(epoch, config.epochs, K0, config.cell.K, config.K_ramp_fraction)
        levels = levels_schedule(epoch, config.epochs, config.levels_start, L, config.levels_ramp_fraction)
        field.set_active_levels(levels)
        order = np.random.default_rng([config.seed, epoch]).permutation(total_pixels)
        n_steps = _steps_per_epoch(total_pixels, config)
        sums = np.zeros(5)
        update_poses = pose_opt is not None and epoch >= config.pose_warmup_epochs
        for step in range(n_steps):
            batch = order[step * config.batch_size:(step + 1) * config.batch_size]
            terms = total_loss(problem, field, rotation, translation, batch, K, epoch)
            terms.check_finite()
            field_opt.zero_grad(set_to_none=True)
            if pose_opt is not None:
                pose_opt.zero_grad(set_to_none=True)
            terms.total.backward()
            field_opt.step()
            field_sched.step()
            if update_poses:
                pose_opt.step()
            f = terms.as_floats()
            sums += [f["intensity"], f["distance"], f["angle"], f["volume"], f["total"]]
        means = sums / n_steps
        with torch.no_grad():
            dtrans = float(translation.norm(dim=1).mean())
            drot = math.degrees(float(rotation.norm(dim=1).mean()))
        rec = EpochRecord(epoch, K, levels, *means.tolist(), dtrans, drot, time.perf_counter() - tic)
        trace.append(rec)
        if callback is not None:
            callback(rec, field, torch.cat([rotation, translation], 1).detach().double().numpy())
        if progress:
            log.info("epoch %d K=%d L=%d l_i=%.5f l_D=%.2e l_th=%.2e R_V=%.2e dt=%.3fmm dr=%.3fdeg (%.1fs)",
                     epoch, K, levels, rec.intensity, rec.distance, rec.angle, rec.volume, dtrans, drot, rec.seconds)

    final_li = mean_intensity_loss(problem, field, rotation, translation, eval_idx, config.cell.K)
    with torch.no_grad():
        params = torch.cat([rotation, translation], 1).double()
        R0, t0 = sequence.stacked_poses()
        R, t = refine_poses_torch(params, torch.as_tensor(R0), torch.as_tensor(t0))
    if config.flags.pose_refinement:
        poses = unstack_poses(R.numpy(), t.numpy())
    else:
        poses = list(sequence.poses)
    return TrainResult(field, poses, params.numpy(), trace, initial_li, final_li, config, problem.bounds)
