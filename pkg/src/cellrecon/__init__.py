"""Implicit volume reconstruction with joint pose refinement for tracked
freehand ultrasound sweeps."""

from .cell import CellConfig, gaussian_weights, predict_intensity, sample_subcells, subcell_layout, volume_regularizer
from .field import HashEncodingConfig, ImplicitField, MlpConfig, encode, field_backward, field_eval
from .geometry import FrameGeometry, PoseParam, RigidPose, exp_map, log_map, pixel_to_world
from .recon import (GridSpec, VolumeGrid, line_fit_error, pearson, pose_error, psnr, query_volume,
                    vnn_reconstruct)
from .sequence import FrameSequence
from .simulator import (NoiseSpec, Scene, Speckle, SweepSpec, corrupt_poses, noise_preset, phantom_scene,
                        phantom_sweep, render_sweep)
from .training import (AblationFlags, LossWeights, TrainConfig, TrainResult, compute_window_bounds, penalty,
                       total_loss, train)

__version__ = "0.1.0"
