"""Per-segment joint optimization of the flow network and motion spline.

Each iteration draws a reference time and sampling plan, evaluates the
combined objective, and steps two AdamW optimizers (network and knots) under
their own learning-rate schedules.  All randomness flows from one seeded
counter-based generator, so a (segment, config, seed) triple reproduces its
run bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .events import CameraIntrinsics, EventSegment, normalize_segment
from .losses import SamplingPlan, temporal_neighbors, total_loss
from .net import FlowNetParams, init_params
from .optim import AdamWState, EarlyStop, LrSchedule, adamw_step, early_stop_update, lr_at
from .spline import MotionSpline, N_KNOTS
from .warp import WarpConfig, WarpDivergence

PRESETS = ("mvsec", "dsec")


@dataclass
class TrainConfig:
    n_iters: int = 1000
    seed: int = 0
    warp: WarpConfig = field(default_factory=WarpConfig)
    sigma: float = 1.0
    w_flow: float = 1.0
    w_geom: float = 0.25
    neigh_size: int = 15000
    geom_sample_size: int = 2048
    flow_lr: LrSchedule = field(default_factory=lambda: LrSchedule(
        "exponential", 1e-4, 6.3e-5, 1000))
    motion_lr: LrSchedule = field(default_factory=lambda: LrSchedule(
        "constant", 1e-3, 1e-3, 1000))
    early_stop: EarlyStop | None = None
    hidden_width: int = 256
    knot_init: float = 0.2
    initial_knots: np.ndarray | None = None   # full (4, 6) override of knot_init
    net_weight_decay: float = 1e-4
    knot_weight_decay: float = 0.0
    events_per_segment: int = 30000           # used by stream-level front ends

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.neigh_size < 1 or self.geom_sample_size < 1:
            raise ValueError("sample sizes must be >= 1")
        if self.initial_knots is not None:
            k = np.asarray(self.initial_knots, dtype=np.float64)
            if k.shape != (N_KNOTS, 6):
                raise ValueError(f"initial_knots must be {(N_KNOTS, 6)}")
            self.initial_knots = k


def preset(name: str) -> TrainConfig:
    """The two published hyperparameter sets."""
    if name == "mvsec":
        return TrainConfig(
            flow_lr=LrSchedule("exponential", 1e-4, 6.3e-5, 1000),
            motion_lr=LrSchedule("constant", 1e-3, 1e-3, 1000),
            warp=WarpConfig(solver="euler", n_steps=8, backprop="adjoint"),
            events_per_segment=30000,
        )
    if name == "dsec":
        return TrainConfig(
            flow_lr=LrSchedule("cosine", 2e-3, 1e-7, 1000),
            motion_lr=LrSchedule("constant", 1e-3, 1e-3, 1000),
            warp=WarpConfig(solver="euler", n_steps=8, backprop="adjoint"),
            events_per_segment=300000,
        )
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


@dataclass
class TrainReport:
    """Per-iteration history plus run outcome (wall time stays off the CSV)."""

    iters: np.ndarray        # (n,)
    loss_flow: np.ndarray
    loss_geom: np.ndarray
    loss_total: np.ndarray
    lr_flow: np.ndarray
    lr_motion: np.ndarray
    stop_reason: str = "completed"
    wall_time_s: float = 0.0

    def __len__(self) -> int:
        return len(self.iters)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("iter,loss_flow,loss_geom,loss_total,lr_flow,lr_motion\n")
            for i in range(len(self.iters)):
                f.write(f"{int(self.iters[i])},"
                        f"{format(self.loss_flow[i], '.17g')},"
                        f"{format(self.loss_geom[i], '.17g')},"
                        f"{format(self.loss_total[i], '.17g')},"
                        f"{format(self.lr_flow[i], '.17g')},"
                        f"{format(self.lr_motion[i], '.17g')}\n")

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        data = np.genfromtxt(path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        return cls(iters=data["iter"].astype(int), loss_flow=data["loss_flow"],
                   loss_geom=data["loss_geom"], loss_total=data["loss_total"],
                   lr_flow=data["lr_flow"], lr_motion=data["lr_motion"])


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the last finite state for post-mortems."""

    def __init__(self, iteration: int, params, spline, report):
        self.iteration = iteration
        self.params = params
        self.spline = spline
        self.report = report
        super().__init__(f"training diverged at iteration {iteration}")


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, i, lf, lg, lt, lrf, lrm):
        self.rows.append((i, lf, lg, lt, lrf, lrm))

    def report(self, stop_reason: str, wall: float) -> TrainReport:
        a = np.asarray(self.rows, dtype=np.float64).reshape(-1, 6)
        return TrainReport(iters=a[:, 0].astype(int), loss_flow=a[:, 1],
                           loss_geom=a[:, 2], loss_total=a[:, 3], lr_flow=a[:, 4],
                           lr_motion=a[:, 5], stop_reason=stop_reason, wall_time_s=wall)


def _initial_spline(cfg: TrainConfig, t_span: float) -> MotionSpline:
    # knot_init sets the raw knot coefficients, which live in normalized-time
    # units.  A nonzero constant matters: the geometric residual is linear in
    # nu, so knots started too close to zero starve the motion gradients
    # before the flow field has converged.  initial_knots overrides the
    # constant with a full matrix, also in normalized units.
    if cfg.initial_knots is not None:
        knots = cfg.initial_knots.copy()
    else:
        knots = np.full((N_KNOTS, 6), cfg.knot_init)
    return MotionSpline(knots, t_span=t_span)


def train_segment(seg: EventSegment, cfg: TrainConfig,
                  intrinsics: CameraIntrinsics | None = None,
                  callback=None):
    """Optimize one segment from scratch; returns (params, spline, report).

    callback, when given, is invoked after every optimizer step as
    callback(iteration, params, spline, breakdown); useful for convergence
    monitoring.  It must not mutate its arguments.
    """
    t0 = time.perf_counter()
    tn, xn = normalize_segment(seg, intrinsics)
    intr = intrinsics if intrinsics is not None else seg.intrinsics
    n = len(tn)

    params = init_params(cfg.seed, cfg.hidden_width)
    spline = _initial_spline(cfg, seg.t_span)
    opt_net = AdamWState(weight_decay=cfg.net_weight_decay)
    opt_knots = AdamWState(weight_decay=cfg.knot_weight_decay)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))

    es = replace(cfg.early_stop) if cfg.early_stop is not None else None
    history = History()
    stop_reason = "completed"

    for i in range(cfg.n_iters):
        lr_f = lr_at(cfg.flow_lr, i)
        lr_m = lr_at(cfg.motion_lr, i)
        t_ref = float(rng.uniform(0.0, 1.0))
        neigh = temporal_neighbors(tn, t_ref, cfg.neigh_size)
        m = min(cfg.geom_sample_size, n)
        geom_idx = np.sort(rng.choice(n, size=m, replace=False))
        plan = SamplingPlan(t_ref=t_ref, neigh_idx=neigh, geom_idx=geom_idx)

        try:
            breakdown, g_theta, g_knots, _ = total_loss(
                params, spline, tn, xn, plan, intr,
                weights=(cfg.w_flow, cfg.w_geom), sigma=cfg.sigma, warp_cfg=cfg.warp)
        except WarpDivergence as e:
            raise TrainingDiverged(
                i, params, spline,
                history.report("diverged", time.perf_counter() - t0)) from e

        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(i, params, spline,
                                   history.report("diverged", time.perf_counter() - t0))

        adamw_step(opt_net, params.arrays(), g_theta, lr_f)
        adamw_step(opt_knots, [spline.knots], [g_knots], lr_m)
        history.add(i, breakdown.flow_loss, breakdown.geom_loss, breakdown.total,
                    lr_f, lr_m)
        if callback is not None:
            callback(i, params, spline, breakdown)

        if es is not None and not early_stop_update(es, i, breakdown.total):
            stop_reason = "early_stop"
            break

    return params, spline, history.report(stop_reason, time.perf_counter() - t0)


@dataclass
class SegmentResult:
    index: int
    params: FlowNetParams | None
    spline: MotionSpline | None
    report: TrainReport | None
    error: str | None = None


def run_sequence(segments: list, cfg: TrainConfig,
                 intrinsics: CameraIntrinsics | None = None) -> list:
    """Train each segment independently from fresh state; errors don't cascade."""
    if not segments:
        raise ValueError("no segments to train")
    results = []
    for seg in segments:
        try:
            params, spline, report = train_segment(seg, cfg, intrinsics)
            results.append(SegmentResult(seg.index, params, spline, report))
        except (TrainingDiverged, ValueError, RuntimeError) as e:
            results.append(SegmentResult(seg.index, None, None,
                                         getattr(e, "report", None), error=str(e)))
    return results


def export_sequence_trajectory(path, results: list, segments: list,
                               samples_per_segment: int = 33) -> None:
    """Stitched per-second twist trajectory across segments, physical time axis."""
    with open(path, "w") as f:
        f.write("t,wx,wy,wz,vx,vy,vz\n")
        for res, seg in zip(results, segments):
            if res.spline is None:
                continue
            ts = np.linspace(0.0, 1.0, samples_per_segment)
            v = res.spline.to_physical(ts)
            for tn_, row in zip(ts, v):
                cols = ",".join(format(x, ".17g") for x in row)
                f.write(f"{format(seg.t_start + tn_ * seg.t_span, '.17g')},{cols}\n")


# -- config file --------------------------------------------------------------

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str) -> dict:
    """key=value lines (comments with #) into a string dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def apply_config(cfg: TrainConfig, options: dict) -> TrainConfig:
    """Overlay flat key=value options onto a TrainConfig.

    Unknown keys raise.  Schedule totals follow n_iters unless given
    explicitly.  Setting early_stop=true attaches the default controller;
    patience/min_delta/warmup refine it.
    """
    cfg = replace(cfg)
    cfg.warp = replace(cfg.warp)
    cfg.flow_lr = replace(cfg.flow_lr)
    cfg.motion_lr = replace(cfg.motion_lr)
    if cfg.early_stop is not None:
        cfg.early_stop = replace(cfg.early_stop)

    def want_es() -> EarlyStop:
        if cfg.early_stop is None:
            cfg.early_stop = EarlyStop()
        return cfg.early_stop

    for key, val in options.items():
        if key == "n_iters":
            cfg.n_iters = int(val)
        elif key == "seed":
            cfg.seed = int(val)
        elif key == "solver":
            cfg.warp.solver = val
        elif key == "n_steps":
            cfg.warp.n_steps = int(val)
        elif key == "backprop":
            cfg.warp.backprop = val
        elif key == "sigma":
            cfg.sigma = float(val)
        elif key == "w_flow":
            cfg.w_flow = float(val)
        elif key == "w_geom":
            cfg.w_geom = float(val)
        elif key == "neigh_size":
            cfg.neigh_size = int(val)
        elif key == "geom_sample_size":
            cfg.geom_sample_size = int(val)
        elif key == "hidden_width":
            cfg.hidden_width = int(val)
        elif key == "knot_init":
            cfg.knot_init = float(val)
        elif key == "net_weight_decay":
            cfg.net_weight_decay = float(val)
        elif key == "knot_weight_decay":
            cfg.knot_weight_decay = float(val)
        elif key == "events_per_segment":
            cfg.events_per_segment = int(val)
        elif key == "flow_lr_kind":
            cfg.flow_lr.kind = val
        elif key == "flow_lr_start":
            cfg.flow_lr.lr_start = float(val)
        elif key == "flow_lr_end":
            cfg.flow_lr.lr_end = float(val)
        elif key == "flow_lr_total":
            cfg.flow_lr.total_iters = int(val)
        elif key == "motion_lr_kind":
            cfg.motion_lr.kind = val
        elif key == "motion_lr_start":
            cfg.motion_lr.lr_start = float(val)
        elif key == "motion_lr_end":
            cfg.motion_lr.lr_end = float(val)
        elif key == "motion_lr_total":
            cfg.motion_lr.total_iters = int(val)
        elif key == "early_stop":
            if _BOOL.get(val.lower(), None) is None:
                raise ValueError(f"early_stop must be boolean, got {val!r}")
            if _BOOL[val.lower()]:
                want_es()
            else:
                cfg.early_stop = None
        elif key == "patience":
            want_es().patience = int(val)
        elif key == "min_delta":
            want_es().min_delta = float(val)
        elif key == "warmup":
            want_es().warmup = int(val)
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "n_iters" in options:
        if "flow_lr_total" not in options:
            cfg.flow_lr.total_iters = cfg.n_iters
        if "motion_lr_total" not in options:
            cfg.motion_lr.total_iters = cfg.n_iters
    # re-validate composed values
    cfg.warp = WarpConfig(cfg.warp.solver, cfg.warp.n_steps, cfg.warp.backprop)
    cfg.flow_lr = LrSchedule(cfg.flow_lr.kind, cfg.flow_lr.lr_start,
                             cfg.flow_lr.lr_end, cfg.flow_lr.total_iters)
    cfg.motion_lr = LrSchedule(cfg.motion_lr.kind, cfg.motion_lr.lr_start,
                               cfg.motion_lr.lr_end, cfg.motion_lr.total_iters)
    return cfg
