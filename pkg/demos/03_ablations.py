"""
Switching components off
========================

Train the full model and one model per ablation on a single heavy-noise seed
and tabulate LFE and PSNR.  Roughly ten minutes on one core; the acceptance
suite runs the same thing over five seeds.
"""

from dataclasses import replace

import torch

from cellrecon.presets import preset
from cellrecon.recon import GridSpec, line_fit_error, pose_error, psnr, query_volume
from cellrecon.simulator import (PHANTOM_WIRE_BOX, blurred_reference, corrupt_poses, noise_preset, render_sweep,
                                 sweep_interior_box)
from cellrecon.training import AblationFlags, train

torch.set_num_threads(1)

seed = 1
cfg = preset("small", seed=seed)
clean = render_sweep(cfg.scene, cfg.sweep)
seq = clean.with_poses(corrupt_poses(clean.poses, noise_preset("heavy", seed)))
wire = GridSpec.covering(*PHANTOM_WIRE_BOX, 0.2)
grid = GridSpec.covering(*sweep_interior_box(clean), 0.2)
ref = blurred_reference(cfg.scene, grid)

print(f"{'configuration':24s} {'LFE mm':>7s} {'PSNR dB':>8s} {'pose mm':>8s}")
for off in (None, "cell_model", "pose_refinement", "pose_regularization", "volume_regularization"):
    flags = AblationFlags.without(off) if off else AblationFlags()
    res = train(seq, replace(cfg.train, flags=flags))
    lfe = line_fit_error(query_volume(res.field, wire), box=PHANTOM_WIRE_BOX).lfe
    print(f"{'w/o ' + off if off else 'full':24s} {lfe:7.3f} {psnr(query_volume(res.field, grid), ref):8.2f} "
          f"{pose_error(res.poses, clean.poses)[0]:8.3f}")
