"""Resolution-cell forward model.

Each pixel's resolution cell is a segment of length ``S_t`` on the normal line
through the pixel centre, split into ``K`` equal subcells.  A pixel's predicted
intensity is the Gaussian-weighted sum of Monte Carlo subcell means of the
field; the weighted spread of those means is the volume regulariser.

Randomness comes from a counter-based generator keyed by
``(seed, epoch, frame, pixel, sample)``, so a pixel's samples do not depend on
which batch or worker evaluates it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class CellConfig:
    K: int = 8
    K_init: int = 3
    slice_thickness: float = 3.0
    sigma: float | None = None  # None -> slice_thickness / 4
    samples_per_subcell: int = 2

    def __post_init__(self):
        if not 1 <= self.K_init <= self.K:
            raise ValueError(f"need 1 <= K_init <= K, got K_init={self.K_init}, K={self.K}")
        if self.slice_thickness <= 0 or self.profile_sigma <= 0:
            raise ValueError("slice_thickness and sigma must be positive")
        if self.samples_per_subcell < 1:
            raise ValueError("samples_per_subcell must be >= 1")

    @property
    def profile_sigma(self) -> float:
        """Width of the Gaussian elevation profile (mm)."""
        return self.slice_thickness / 4.0 if self.sigma is None else float(self.sigma)

    def with_K(self, K: int) -> "CellConfig":
        return CellConfig(int(K), min(self.K_init, int(K)), self.slice_thickness, self.sigma, self.samples_per_subcell)


@dataclass(frozen=True)
class SubcellLayout:
    centers: np.ndarray  # signed offsets along the normal (mm)

    @property
    def distances(self) -> np.ndarray:
        """Signed distance of each subcell centre to the image plane."""
        return self.centers


def subcell_layout(K: int, slice_thickness: float) -> SubcellLayout:
    k = np.arange(1, K + 1)
    width = slice_thickness / K
    # (k - (K+1)/2) is exactly antisymmetric, so d_k = -d_{K+1-k} bitwise
    return SubcellLayout((k - (K + 1) / 2.0) * width)


def gaussian_weights(config: CellConfig) -> np.ndarray:
    """Normalised weights ``exp(-d_k^2 / 2 sigma^2) / Z`` of the ``K`` subcells."""
    d2 = subcell_layout(config.K, config.slice_thickness).distances ** 2
    # shifted so the central subcells get exp(0): no 0/0 when sigma is tiny
    e = np.exp(-(d2 - d2.min()) / (2.0 * config.profile_sigma**2))
    return e / e.sum()


# ---------------------------------------------------------------------------
# counter-based uniforms

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def counter_uniform(*keys, shape: tuple[int, ...] = ()) -> np.ndarray:
    """Uniform [0, 1) variates determined only by ``keys`` and position.

    ``keys`` are integers or integer arrays broadcast together; ``shape`` adds
    trailing axes enumerated as extra counters.
    """
    with np.errstate(over="ignore"):
        arrays = np.broadcast_arrays(*[np.asarray(k, dtype=np.int64) for k in keys])
        state = np.zeros(arrays[0].shape, dtype=np.uint64)
        for a in arrays:
            state = _mix(state ^ (a.astype(np.uint64) + _GOLDEN))
        state = state.reshape(state.shape + (1,) * len(shape))
        counter = np.arange(int(np.prod(shape, dtype=np.int64)), dtype=np.uint64).reshape(shape)
        out = _mix(state ^ (counter * _GOLDEN + np.uint64(1)))
    return (out >> np.uint64(11)).astype(np.float64) * 2.0**-53


def pixel_uniforms(seed: int, epoch: int, frame_idx, pixel_idx, K: int, N_s: int) -> np.ndarray:
    """``(M, K, N_s)`` sample offsets in [0, 1) for the given pixels."""
    return counter_uniform(seed, epoch, K, frame_idx, pixel_idx, shape=(K, N_s))


# ---------------------------------------------------------------------------
# sampling and prediction


def _offsets(config: CellConfig, u, like: torch.Tensor | None = None) -> torch.Tensor:
    centers = subcell_layout(config.K, config.slice_thickness).centers
    width = config.slice_thickness / config.K
    u = torch.as_tensor(u) if not torch.is_tensor(u) else u
    dtype = like.dtype if like is not None else torch.float64
    c = torch.as_tensor(centers, dtype=dtype)
    return c[:, None] + (u.to(dtype) - 0.5) * width


def sample_subcells(points, normals, config: CellConfig, rng=None, u=None) -> torch.Tensor:
    """Stratified samples on the normal line through each pixel.

    ``points`` and ``normals`` are ``(M, 3)``.  Offsets come from ``u`` (an
    ``(M, K, N_s)`` array of [0, 1) variates) or else from ``rng`` (a numpy
    ``Generator``).  Returns ``(M, K, N_s, 3)``; sample ``(k, j)`` lies at
    ``p + n * (center_k + (u - 1/2) * S_t / K)``.
    """
    points = torch.as_tensor(points) if not torch.is_tensor(points) else points
    normals = torch.as_tensor(normals, dtype=points.dtype) if not torch.is_tensor(normals) else normals
    M = points.shape[0]
    if u is None:
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.random((M, config.K, config.samples_per_subcell))
    off = _offsets(config, u, points)  # (M, K, N_s)
    return points[:, None, None, :] + normals[:, None, None, :] * off[..., None]


def predict_intensity(points, normals, field_fn, config: CellConfig, rng=None, u=None,
                      weights: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Predicted pixel intensities and per-subcell means.

    ``field_fn`` maps an ``(P, 3)`` tensor to ``(P,)`` values.  Returns
    ``(g_hat (M,), subcell_means (M, K))``.
    """
    samples = sample_subcells(points, normals, config, rng=rng, u=u)
    M, K, N_s, _ = samples.shape
    vals = field_fn(samples.reshape(-1, 3)).reshape(M, K, N_s)
    # offsets from one sample per pixel: a constant field then comes out
    # exactly, without the rounding of sum(w) and of the sample means
    pivot = vals[:, :1, :1]
    dev = (vals - pivot).mean(-1)
    if weights is None:
        weights = torch.as_tensor(gaussian_weights(config), dtype=vals.dtype)
    g_hat = pivot[:, 0, 0] + (dev * weights.to(vals.dtype)).sum(-1)
    return g_hat, pivot[:, :, 0] + dev


def volume_regularizer(subcell_means, weights, g_hat):
    """Weighted subcell variance ``sum_k w_k (mean_k - g_hat)^2`` per pixel."""
    if torch.is_tensor(subcell_means):
        w = torch.as_tensor(weights, dtype=subcell_means.dtype)
        g = torch.as_tensor(g_hat, dtype=subcell_means.dtype)
        return (w * (subcell_means - g[..., None]) ** 2).sum(-1)
    m = np.asarray(subcell_means, dtype=float)
    return (np.asarray(weights) * (m - np.asarray(g_hat, dtype=float)[..., None]) ** 2).sum(-1)
