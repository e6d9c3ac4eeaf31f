"""Evaluation: dense flow extraction, flow error metrics, motion RMS errors.

Flow grids carry either instantaneous velocities (px/s) or displacements over
a normalized interval (px), tagged by mode.  Flow metrics follow the event
benchmark conventions: errors averaged over pixels that are valid in both
grids and event-active; AE is the angle between the 3-vectors (u, v, 1).

The linear-velocity scale is unobservable to the depth-free residual, so
motion RMS reports nu both raw and after optimal positive scale alignment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import net as net_mod
from .events import CameraIntrinsics, Events
from .spline import MotionSpline
from .warp import WarpConfig, warp_to

FLOW_MAGIC = b"FLW1"
MODE_TAGS = {"px_per_s": 0, "px_per_interval": 1}
MODE_NAMES = {v: k for k, v in MODE_TAGS.items()}


class EmptyEvaluationError(ValueError):
    """No valid pixels survive the mask intersection."""


@dataclass
class FlowGrid:
    values: np.ndarray          # (H, W, 2)
    mask: np.ndarray            # (H, W) bool
    mode: str = "px_per_s"      # or "px_per_interval"
    interval: float = 0.0       # normalized-interval length for displacement mode

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mode not in MODE_TAGS:
            raise ValueError(f"mode must be one of {tuple(MODE_TAGS)}")
        if self.values.shape[:2] != self.mask.shape or self.values.shape[2:] != (2,):
            raise ValueError("values must be (H, W, 2) with matching (H, W) mask")


@dataclass
class MetricsReport:
    epe: float
    ae: float
    out_pct: float
    rms_omega: float
    rms_nu: float
    n_valid: int

    def summary(self) -> str:
        return (f"epe_px={self.epe:.6g} ae_deg={self.ae:.6g} out_pct={self.out_pct:.6g} "
                f"rms_omega_degs={self.rms_omega:.6g} rms_nu_ms={self.rms_nu:.6g} "
                f"n_valid={self.n_valid}")


def _pixel_grid_normalized(intrinsics: CameraIntrinsics):
    xs, ys = np.meshgrid(np.arange(intrinsics.width, dtype=np.float64),
                         np.arange(intrinsics.height, dtype=np.float64))
    xn = np.stack([(xs - intrinsics.cx) / intrinsics.fx,
                   (ys - intrinsics.cy) / intrinsics.fy], axis=-1)
    return xn


def extract_flow_grid(params, t: float, intrinsics: CameraIntrinsics,
                      interval: float | None = None, t_span: float = 1.0,
                      warp_cfg: WarpConfig | None = None) -> FlowGrid:
    """Query the trained field densely at every pixel center.

    Without an interval: instantaneous flow at normalized time t, converted to
    px/s through the intrinsics and the window length t_span (seconds).  With
    an interval: each pixel is warped from t to t + interval (normalized) and
    the pixel displacement is returned.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    h, w = intrinsics.height, intrinsics.width
    xn = _pixel_grid_normalized(intrinsics).reshape(-1, 2)
    scale = np.array([intrinsics.fx, intrinsics.fy])
    if interval is None:
        q = np.concatenate([np.full((len(xn), 1), t), xn], axis=1)
        u = net_mod.forward(params, q)
        values = (u * scale / t_span).reshape(h, w, 2)
        return FlowGrid(values, np.ones((h, w), bool), "px_per_s")
    if not 0.0 <= t + interval <= 1.0:
        raise ValueError("t + interval must stay in [0, 1]")
    cfg = warp_cfg if warp_cfg is not None else WarpConfig()
    x1 = warp_to(params, np.full(len(xn), t), xn, t + interval, cfg)
    values = ((x1 - xn) * scale).reshape(h, w, 2)
    return FlowGrid(values, np.ones((h, w), bool), "px_per_interval",
                    interval=float(interval))


def event_activity_mask(events: Events, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixels receiving at least one event (rounded to the nearest pixel)."""
    mask = np.zeros((intrinsics.height, intrinsics.width), dtype=bool)
    if len(events):
        xi = np.clip(np.round(events.x).astype(int), 0, intrinsics.width - 1)
        yi = np.clip(np.round(events.y).astype(int), 0, intrinsics.height - 1)
        mask[yi, xi] = True
    return mask


def flow_metrics(pred: FlowGrid, gt: FlowGrid, event_mask: np.ndarray | None = None):
    """(epe, ae_deg, out_pct, n_valid) over valid-and-active pixels."""
    if pred.values.shape != gt.values.shape:
        raise ValueError("prediction and ground truth shapes differ")
    valid = pred.mask & gt.mask
    if event_mask is not None:
        valid = valid & np.asarray(event_mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyEvaluationError("no valid pixels to evaluate")
    dp = pred.values[valid]
    dg = gt.values[valid]
    err = np.linalg.norm(dp - dg, axis=1)
    epe = float(err.mean())
    out_pct = float(100.0 * np.mean(err > 3.0))
    p3 = np.concatenate([dp, np.ones((len(dp), 1))], axis=1)
    g3 = np.concatenate([dg, np.ones((len(dg), 1))], axis=1)
    cosang = np.sum(p3 * g3, axis=1) / (np.linalg.norm(p3, axis=1) * np.linalg.norm(g3, axis=1))
    ae = float(np.degrees(np.mean(np.arccos(np.clip(cosang, -1.0, 1.0)))))
    return epe, ae, out_pct, n_valid


def motion_rms(pred_twists: np.ndarray, gt_twists: np.ndarray, align_nu_scale: bool = False):
    """RMS twist errors over aligned time samples.

    pred/gt are (M, 6) per-second twists [omega | nu].  Returns a dict with
    rms_omega (deg/s), rms_nu (m/s), and, when align_nu_scale is set, the
    scale-aligned nu RMS, the fitted positive scale, and the mean direction
    angle between predicted and true nu (degrees).
    """
    pred = np.asarray(pred_twists, dtype=np.float64)
    gt = np.asarray(gt_twists, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 6:
        raise ValueError("twist arrays must both be (M, 6)")
    d_omega = pred[:, :3] - gt[:, :3]
    rms_omega = float(np.degrees(np.sqrt(np.mean(d_omega ** 2))))
    d_nu = pred[:, 3:] - gt[:, 3:]
    rms_nu = float(np.sqrt(np.mean(d_nu ** 2)))
    out = {"rms_omega": rms_omega, "rms_nu": rms_nu}
    if align_nu_scale:
        pn, gn = pred[:, 3:], gt[:, 3:]
        denom = float(np.sum(pn * pn))
        lam = float(np.sum(pn * gn)) / denom if denom > 0 else 0.0
        lam = max(lam, 1e-12)
        out["rms_nu_aligned"] = float(np.sqrt(np.mean((lam * pn - gn) ** 2)))
        out["nu_scale"] = lam
        norms = np.linalg.norm(pn, axis=1) * np.linalg.norm(gn, axis=1)
        ok = norms > 0
        if np.any(ok):
            cosang = np.sum(pn[ok] * gn[ok], axis=1) / norms[ok]
            out["nu_direction_deg"] = float(
                np.degrees(np.mean(np.arccos(np.clip(cosang, -1.0, 1.0)))))
        else:
            out["nu_direction_deg"] = float("nan")
    return out


def sample_twists(spline: MotionSpline, n_samples: int = 33) -> np.ndarray:
    """Per-second twists on a uniform normalized-time grid, (n, 6)."""
    ts = np.linspace(0.0, 1.0, n_samples)
    return spline.to_physical(ts)


# -- flow-grid binary format --------------------------------------------------

def save_flow_grid(path, grid: FlowGrid) -> None:
    """FLW1 container: header, float32 u/v interleaved row-major, mask bytes."""
    h, w = grid.mask.shape
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<IIBf", h, w, MODE_TAGS[grid.mode], grid.interval))
        f.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(grid.mask, dtype=np.uint8).tobytes())


def load_flow_grid(path) -> FlowGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLOW_MAGIC:
            raise ValueError(f"{path}: bad flow-grid magic {magic!r}")
        h, w, tag, interval = struct.unpack("<IIBf", f.read(13))
        if tag not in MODE_NAMES:
            raise ValueError(f"{path}: unknown mode tag {tag}")
        values = np.frombuffer(f.read(8 * h * w), dtype="<f4").astype(np.float64)
        mask = np.frombuffer(f.read(h * w), dtype=np.uint8).astype(bool)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return FlowGrid(values.reshape(h, w, 2), mask.reshape(h, w),
                    MODE_NAMES[tag], float(interval))
