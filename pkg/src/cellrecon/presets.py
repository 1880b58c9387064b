"""Named run configurations.

``default`` is the full-size setup.  ``small`` and ``bench`` shrink the field
and the schedule so a complete simulate/train/evaluate cycle fits in minutes on
one CPU core; the acceptance suite and the demos use them.
"""

from __future__ import annotations

from dataclasses import replace

from .cell import CellConfig
from .field import HashEncodingConfig, MlpConfig
from .io import ReconConfig, RunConfig
from .simulator import NoiseSpec, Speckle, phantom_scene, phantom_sweep
from .training import TrainConfig


def _small_train(**kw) -> TrainConfig:
    base = dict(
        epochs=10, batch_size=8192, steps_per_epoch=30,
        lr_pose=2e-2, lr_pose_rotation=1e-5,
        encoding=HashEncodingConfig(num_levels=8, table_size_log2=16, base_resolution=8),
        mlp=MlpConfig(hidden_layers=2, hidden_dim=64),
        cell=CellConfig(K=8, K_init=3),
    )
    base.update(kw)
    return TrainConfig(**base)


def default() -> RunConfig:
    return RunConfig()


def small(seed: int = 0, speckle: bool = True) -> RunConfig:
    """48 frames of 64 x 64 pixels over the phantom."""
    scene = phantom_scene(Speckle(0.3, 1.0, seed) if speckle else None)
    return RunConfig(train=_small_train(seed=seed), sweep=phantom_sweep(48, 64),
                     noise=NoiseSpec(seed=seed), recon=ReconConfig(spacing=0.2), scene=scene)


def bench(seed: int = 0, speckle: bool = False) -> RunConfig:
    """64 frames of 96 x 96 pixels, noiseless by default."""
    cfg = small(seed, speckle)
    cfg.sweep = phantom_sweep(64, 96)
    cfg.train = _small_train(seed=seed, epochs=12, steps_per_epoch=40,
                             encoding=HashEncodingConfig(num_levels=10, table_size_log2=17, base_resolution=8))
    return cfg


PRESETS = {"default": default, "small": small, "bench": bench}


def preset(name: str, seed: int = 0, **kw) -> RunConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = factory(seed, **kw) if name != "default" else factory()
    if name == "default":
        cfg.train = replace(cfg.train, seed=seed)
        cfg.noise = replace(cfg.noise, seed=seed)
    return cfg
