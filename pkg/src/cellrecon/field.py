"""Implicit scatter field: multiresolution hash encoding followed by a sine MLP.

The field maps a world point (mm) to an echo intensity in [0, 1].  Points are
normalised into the configured domain box (and clamped to it) before encoding.
All levels share one ``(L, T, F)`` parameter tensor; levels above
``active_levels`` are skipped and contribute zeros, so their table contents
never influence the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._hashgrid import HashGridFunction

_PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashEncodingConfig:
    num_levels: int = 12
    features_per_level: int = 2
    table_size_log2: int = 18
    base_resolution: int = 16
    per_level_scale: float = 1.5
    domain_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    domain_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    active_levels: int | None = None  # None means all levels

    def __post_init__(self):
        if self.active_levels is None:
            self.active_levels = self.num_levels
        if not 1 <= self.active_levels <= self.num_levels:
            raise ValueError(f"active_levels must be in [1, {self.num_levels}], got {self.active_levels}")
        if self.per_level_scale <= 1:
            raise ValueError("per_level_scale must be > 1")
        if any(hi <= lo for lo, hi in zip(self.domain_min, self.domain_max)):
            raise ValueError("domain_max must exceed domain_min on every axis")

    @property
    def table_size(self) -> int:
        return 2**self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.num_levels * self.features_per_level

    def resolutions(self) -> list[int]:
        return [int(math.floor(self.base_resolution * self.per_level_scale**l)) for l in range(self.num_levels)]


@dataclass
class MlpConfig:
    hidden_layers: int = 4
    hidden_dim: int = 128
    activation_frequency: float = 30.0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_dim < 1:
            raise ValueError("hidden_layers and hidden_dim must be >= 1")


class HashEncoding(nn.Module):
    def __init__(self, config: HashEncodingConfig, generator: torch.Generator | None = None,
                 init_scale: float = 1e-4):
        super().__init__()
        self.config = config
        tables = torch.empty(config.num_levels, config.table_size, config.features_per_level)
        tables.uniform_(-init_scale, init_scale, generator=generator)
        self.tables = nn.Parameter(tables)
        res = config.resolutions()
        self.register_buffer("resolution", torch.tensor(res, dtype=torch.int64), persistent=False)
        # coarse levels whose full vertex lattice fits in the table are indexed densely
        self.register_buffer("dense", torch.tensor([(r + 1) ** 3 <= config.table_size for r in res]),
                             persistent=False)
        self._res_np = np.asarray(res, dtype=np.int64)
        self._dense_np = np.asarray([(r + 1) ** 3 <= config.table_size for r in res])
        self.register_buffer("lo", torch.tensor(config.domain_min, dtype=torch.float64), persistent=False)
        self.register_buffer("hi", torch.tensor(config.domain_max, dtype=torch.float64), persistent=False)

    @property
    def active_levels(self) -> int:
        return self.config.active_levels

    def set_active_levels(self, k: int) -> None:
        if not 1 <= k <= self.config.num_levels:
            raise ValueError(f"active_levels must be in [1, {self.config.num_levels}]")
        self.config.active_levels = int(k)

    def normalize(self, points: torch.Tensor) -> torch.Tensor:
        lo = self.lo.to(points.dtype)
        hi = self.hi.to(points.dtype)
        return ((points - lo) / (hi - lo)).clamp(0.0, 1.0)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        k = cfg.active_levels
        M = points.shape[:-1]
        x = self.normalize(points).reshape(-1, 3)
        feats = HashGridFunction.apply(x, self.tables, self._res_np, self._dense_np, k)
        feats = feats.to(points.dtype).reshape(M + (k * cfg.features_per_level,))
        inactive = cfg.num_levels - k
        if inactive:
            feats = torch.cat([feats, feats.new_zeros(M + (inactive * cfg.features_per_level,))], -1)
        return feats

    def reference_forward(self, points: torch.Tensor) -> torch.Tensor:
        """Pure-torch lookup, identical in value to :meth:`forward`; kept as an
        independent check of the compiled kernels."""
        cfg = self.config
        k = cfg.active_levels
        M = points.shape[:-1]
        x = self.normalize(points).reshape(-1, 1, 3)
        res = self.resolution[:k]
        scaled = x * res.to(x.dtype)[:, None]  # (P, k, 3)
        base = torch.minimum(torch.floor(scaled), (res - 1).to(x.dtype)[:, None])
        frac = scaled - base
        # per-axis corner coordinates (P, k, 3, 2); the 8 corners are their outer combinations
        c = base.to(torch.int64)[..., None] + torch.arange(2, device=points.device)
        cx, cy, cz = c[:, :, 0], c[:, :, 1], c[:, :, 2]
        n = (res + 1)[:, None]
        dense = (cx[..., :, None, None] + n[..., None, None] * cy[..., None, :, None]
                 + (n * n)[..., None, None] * cz[..., None, None, :])
        hashed = torch.bitwise_xor(torch.bitwise_xor(
            (cx * _PRIMES[0])[..., :, None, None], (cy * _PRIMES[1])[..., None, :, None]),
            (cz * _PRIMES[2])[..., None, None, :]) & (cfg.table_size - 1)
        idx = torch.where(self.dense[:k, None, None, None], dense, hashed)
        idx = idx + (torch.arange(k, device=points.device) * cfg.table_size)[:, None, None, None]
        wa = torch.stack([1.0 - frac, frac], -1)  # (P, k, 3, 2)
        w = wa[:, :, 0, :, None, None] * wa[:, :, 1, None, :, None] * wa[:, :, 2, None, None, :]
        F = cfg.features_per_level
        table = self.tables[:k].reshape(-1, F)
        vals = torch.nn.functional.embedding(idx.reshape(idx.shape[0], -1), table)
        feats = (w.reshape(-1, k, 8, 1) * vals.reshape(-1, k, 8, F).to(w.dtype)).sum(2)
        feats = feats.reshape(M + (k * F,))
        inactive = cfg.num_levels - k
        if inactive:
            feats = torch.cat([feats, points.new_zeros(M + (inactive * F,)).to(feats.dtype)], -1)
        return feats


class SineLayer(nn.Module):
    def __init__(self, in_dim, out_dim, omega, first, generator=None):
        super().__init__()
        self.omega = omega
        self.linear = nn.Linear(in_dim, out_dim)
        bound = 1.0 / in_dim if first else math.sqrt(6.0 / in_dim) / omega
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound, generator=generator)
            # zero phase: the hash features carry all spatial variation
            self.linear.bias.zero_()

    def forward(self, x):
        return torch.sin(self.omega * self.linear(x))


class SirenMLP(nn.Module):
    def __init__(self, in_dim: int, config: MlpConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        omega = config.activation_frequency
        layers = [SineLayer(in_dim, config.hidden_dim, omega, True, generator)]
        for _ in range(config.hidden_layers - 1):
            layers.append(SineLayer(config.hidden_dim, config.hidden_dim, omega, False, generator))
        self.hidden = nn.Sequential(*layers)
        self.out = nn.Linear(config.hidden_dim, 1)
        bound = math.sqrt(6.0 / config.hidden_dim) / omega
        with torch.no_grad():
            self.out.weight.uniform_(-bound, bound, generator=generator)
            self.out.bias.zero_()

    def forward(self, x):
        return self.out(self.hidden(x)).squeeze(-1)


class ImplicitField(nn.Module):
    """Hash encoding -> sine MLP -> sigmoid."""

    def __init__(self, encoding: HashEncodingConfig | None = None, mlp: MlpConfig | None = None,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        encoding = encoding if encoding is not None else HashEncodingConfig()
        mlp = mlp if mlp is not None else MlpConfig()
        g = torch.Generator().manual_seed(int(seed))
        self.encoding = HashEncoding(encoding, g)
        self.mlp = SirenMLP(encoding.output_dim, mlp, g)
        self.to(dtype)

    @property
    def encoding_config(self) -> HashEncodingConfig:
        return self.encoding.config

    @property
    def mlp_config(self) -> MlpConfig:
        return self.mlp.config

    @property
    def dtype(self) -> torch.dtype:
        return self.encoding.tables.dtype

    def logits(self, points: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.encoding(points.to(self.dtype)))

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(points))

    def set_active_levels(self, k: int) -> None:
        self.encoding.set_active_levels(k)

    def hash_parameters(self):
        return [self.encoding.tables]

    def mlp_parameters(self):
        return list(self.mlp.parameters())


def encode(points, field: ImplicitField) -> torch.Tensor:
    """Feature vector(s) of ``points`` under the field's hash encoding."""
    pts = torch.as_tensor(np.asarray(points) if not torch.is_tensor(points) else points, dtype=field.dtype)
    return field.encoding(pts)


def field_eval(points, field: ImplicitField, chunk: int = 1 << 16) -> torch.Tensor:
    """Evaluate the field on ``(M, 3)`` points without tracking gradients."""
    pts = torch.as_tensor(np.asarray(points) if not torch.is_tensor(points) else points, dtype=field.dtype)
    flat = pts.reshape(-1, 3)
    with torch.no_grad():
        out = torch.cat([field(flat[i:i + chunk]) for i in range(0, flat.shape[0], chunk)]) \
            if flat.shape[0] else flat.new_zeros(0)
    return out.reshape(pts.shape[:-1])


def field_backward(points, upstream, field: ImplicitField) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Reverse-mode gradients of ``sum(upstream * field(points))``.

    Returns a ``{parameter name: gradient}`` dict and the gradient with respect
    to the input points.  Hash-table gradients accumulate over every point
    whose interpolation stencil touches an entry.
    """
    pts = torch.as_tensor(points, dtype=field.dtype).detach().clone().requires_grad_(True)
    up = torch.as_tensor(upstream, dtype=field.dtype)
    names, params = zip(*field.named_parameters())
    out = field(pts)
    grads = torch.autograd.grad((out * up).sum(), (pts,) + params, allow_unused=True)
    param_grads = {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads[1:])}
    return param_grads, grads[0]
