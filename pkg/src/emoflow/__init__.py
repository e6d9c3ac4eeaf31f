"""Unsupervised event-camera optical flow and egomotion estimation.

The package couples an implicit flow field (a coordinate MLP queried at
(t, x, y)) with a cubic B-spline camera-motion model.  Training maximizes the
contrast of the image of warped events, where warping integrates each event
along the flow field, and ties flow to egomotion through a depth-free
differential epipolar residual.  Everything is numpy; gradients are analytic.
"""

from .events import (CameraIntrinsics, Event, Events, EventSegment, FormatError,
                     normalize_event, normalize_points, normalize_segment,
                     read_events, read_events_binary, read_events_csv,
                     segment_stream, unnormalize_points, write_events_binary,
                     write_events_csv)
from .geometry import (Twist, a_matrix, b_matrix, geometric_residual,
                       homogeneous, motion_field, s_matrix, skew)
from .losses import (IWE, LossBreakdown, SamplingPlan, flow_loss_and_grad,
                     geometric_loss_and_grad, rasterize_iwe, temporal_neighbors,
                     total_loss, variance_loss)
from .metrics import (FlowGrid, MetricsReport, event_activity_mask,
                      extract_flow_grid, flow_metrics, load_flow_grid,
                      motion_rms, sample_twists, save_flow_grid)
from .net import (FlowNetParams, forward, init_params, backward, load_checkpoint,
                  n_params, save_checkpoint)
from .optim import (AdamWState, EarlyStop, LrSchedule, adamw_step,
                    early_stop_update, lr_at)
from .spline import MotionSpline, basis, write_trajectory_csv
from .synth import (DegenerateSceneError, GroundTruth, SceneSpec, generate,
                    scene_preset, preset_motion)
from .trainer import (TrainConfig, TrainReport, TrainingDiverged, apply_config,
                      parse_config_text, preset, run_sequence, train_segment)
from .warp import (WarpConfig, WarpDivergence, point_tracks, warp_backward,
                   warp_to)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Event", "Events", "EventSegment", "FormatError",
    "normalize_event", "normalize_points", "normalize_segment", "read_events",
    "read_events_binary", "read_events_csv", "segment_stream",
    "unnormalize_points", "write_events_binary", "write_events_csv",
    "Twist", "a_matrix", "b_matrix", "geometric_residual", "homogeneous",
    "motion_field", "s_matrix", "skew",
    "IWE", "LossBreakdown", "SamplingPlan", "flow_loss_and_grad",
    "geometric_loss_and_grad", "rasterize_iwe", "temporal_neighbors",
    "total_loss", "variance_loss",
    "FlowGrid", "MetricsReport", "event_activity_mask", "extract_flow_grid",
    "flow_metrics", "load_flow_grid", "motion_rms", "sample_twists",
    "save_flow_grid",
    "FlowNetParams", "forward", "init_params", "backward", "load_checkpoint",
    "n_params", "save_checkpoint",
    "AdamWState", "EarlyStop", "LrSchedule", "adamw_step", "early_stop_update",
    "lr_at",
    "MotionSpline", "basis", "write_trajectory_csv",
    "DegenerateSceneError", "GroundTruth", "SceneSpec", "generate",
    "scene_preset", "preset_motion",
    "TrainConfig", "TrainReport", "TrainingDiverged", "apply_config",
    "parse_config_text", "preset", "run_sequence", "train_segment",
    "WarpConfig", "WarpDivergence", "point_tracks", "warp_backward", "warp_to",
    "__version__",
]
