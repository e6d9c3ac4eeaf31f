"""Synthetic event streams from a textured plane under known camera motion.

A set of tracked points on a planar scene is integrated through the analytic
motion field u = (1/Z) A(x_hat) nu + B(x_hat) omega induced by a spline twist
trajectory; a point emits an event whenever its pixel displacement since its
last event crosses a threshold.  Because the generative law is exactly the
model the estimator assumes, every quantity the losses and metrics consume has
an analytic ground truth here: dense flow, per-event displacement, twists.

Scene points and the plane itself are expressed in the (moving) camera frame:
point kinematics X' = -omega x X - nu, plane normal n' = -omega x n and offset
d' = -nu . n, all in normalized time (twists in per-window units).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import CameraIntrinsics, Events
from .geometry import geometric_residual, motion_field
from .spline import MotionSpline

INTEGRATION_STEPS = 1000  # RK4 grid over normalized time, step 1e-3

TEXTURES = ("random", "stripes", "blobs")


class DegenerateSceneError(RuntimeError):
    """Motion drives (nearly) all points out of frame or behind the camera."""


@dataclass
class SceneSpec:
    intrinsics: CameraIntrinsics
    z0: float = 2.0
    tilt: np.ndarray | None = None   # plane normal; None means fronto-parallel
    n_points: int = 2000
    events_per_point_per_px: float = 1.0
    duration: float = 0.1
    seed: int = 0
    texture: str = "random"
    stripe_angle: float = 0.5   # radians; direction lines run along
    n_stripes: int = 8
    n_blobs: int = 150          # cluster count for the blobs texture
    blob_sigma: float = 0.8     # cluster spread (px)
    jitter_t: float = 0.0       # optional timestamp jitter std (seconds)
    margin: float = 2.0         # seeding inset from the frame border (px)

    def __post_init__(self):
        if self.z0 <= 0:
            raise ValueError("z0 must be positive")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if self.events_per_point_per_px <= 0:
            raise ValueError("events_per_point_per_px must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.tilt is not None:
            n = np.asarray(self.tilt, dtype=np.float64).reshape(3)
            if n[2] <= 0:
                raise ValueError("plane normal must face the camera (n_z > 0)")
            self.tilt = n / np.linalg.norm(n)


@dataclass
class GroundTruth:
    """Generative state retained for exact evaluation."""

    scene: SceneSpec
    motion: MotionSpline              # normalized-time twists over [0, 1]
    tau: np.ndarray                   # (S+1,) normalized time grid
    plane_n: np.ndarray               # (S+1, 3)
    plane_d: np.ndarray               # (S+1,)
    tracks_px: np.ndarray             # (S+1, P, 2) point pixel trajectories
    in_frame: np.ndarray              # (S+1, P) bool
    event_point: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    event_step: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    # -- twists ---------------------------------------------------------------

    def twist_normalized(self, tau) -> np.ndarray:
        """(..., 6) twist in per-normalized-time units."""
        return self.motion.velocity(tau)

    def twist_physical(self, t_seconds) -> np.ndarray:
        """(..., 6) twist in rad/s and m/s."""
        tau = np.asarray(t_seconds, dtype=np.float64) / self.scene.duration
        return self.motion.velocity(tau) / self.scene.duration

    # -- plane state ----------------------------------------------------------

    def plane_at(self, tau: float):
        """Linearly interpolated plane (n, d) at normalized time tau."""
        s = float(tau) * (len(self.tau) - 1)
        j = int(np.clip(np.floor(s), 0, len(self.tau) - 2))
        a = s - j
        n = (1 - a) * self.plane_n[j] + a * self.plane_n[j + 1]
        d = (1 - a) * self.plane_d[j] + a * self.plane_d[j + 1]
        return n, d

    def depth_at(self, tau: float, xn: np.ndarray):
        """Plane depth behind normalized pixels (...,2); non-positive = invalid."""
        n, d = self.plane_at(tau)
        xn = np.asarray(xn, dtype=np.float64)
        denom = xn[..., 0] * n[0] + xn[..., 1] * n[1] + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(np.abs(denom) > 1e-12, d / denom, -1.0)
        return z

    # -- flow -----------------------------------------------------------------

    def flow_normalized(self, tau: float, xn: np.ndarray):
        """Flow in normalized coords per normalized time, plus validity mask."""
        z = self.depth_at(tau, xn)
        valid = z > 1e-9
        zsafe = np.where(valid, z, 1.0)
        vel = self.motion.velocity(float(tau))
        u = motion_field(xn, zsafe, vel[:3], vel[3:])
        return u, valid

    def flow_px_per_s(self, t_seconds: float, px: np.ndarray):
        """Ground-truth flow in pixels per second at pixel coords (..., 2)."""
        intr = self.scene.intrinsics
        px = np.asarray(px, dtype=np.float64)
        xn = np.stack([(px[..., 0] - intr.cx) / intr.fx,
                       (px[..., 1] - intr.cy) / intr.fy], axis=-1)
        tau = float(t_seconds) / self.scene.duration
        u, valid = self.flow_normalized(tau, xn)
        scale = np.array([intr.fx, intr.fy]) / self.scene.duration
        return u * scale, valid

    def flow_grid(self, t_seconds: float):
        """Dense px/s flow over the frame; returns (values (H,W,2), mask)."""
        intr = self.scene.intrinsics
        xs, ys = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                             np.arange(intr.height, dtype=np.float64))
        px = np.stack([xs, ys], axis=-1)
        return self.flow_px_per_s(t_seconds, px)

    def displacement_grid(self, tau0: float, tau1: float, n_steps: int = 100):
        """True pixel displacement from tau0 to tau1 per start pixel (px units).

        Integrates the normalized motion field with RK4 from each pixel
        center; the mask drops pixels whose ray leaves the plane's valid
        half-space at any stage.
        """
        intr = self.scene.intrinsics
        xs, ys = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                             np.arange(intr.height, dtype=np.float64))
        xn = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy], axis=-1)
        x = xn.reshape(-1, 2).copy()
        valid = np.ones(len(x), dtype=bool)
        h = (tau1 - tau0) / n_steps
        for j in range(n_steps):
            t = tau0 + j * h
            k1, v1 = self.flow_normalized(t, x)
            k2, v2 = self.flow_normalized(t + 0.5 * h, x + 0.5 * h * k1)
            k3, v3 = self.flow_normalized(t + 0.5 * h, x + 0.5 * h * k2)
            k4, v4 = self.flow_normalized(t + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            valid &= v1 & v2 & v3 & v4
        disp = (x - xn.reshape(-1, 2)) * np.array([intr.fx, intr.fy])
        shape = (intr.height, intr.width)
        return disp.reshape(shape + (2,)), valid.reshape(shape)

    # -- per-event ------------------------------------------------------------

    def event_positions_at(self, tau: float) -> np.ndarray:
        """True pixel position of each event's source point at normalized tau."""
        s = float(tau) * (len(self.tau) - 1)
        j = int(np.clip(np.floor(s), 0, len(self.tau) - 2))
        a = s - j
        p0 = self.tracks_px[j, self.event_point]
        p1 = self.tracks_px[j + 1, self.event_point]
        return (1 - a) * p0 + a * p1

    def event_displacement_to(self, tau_ref: float, events: Events) -> np.ndarray:
        """True displacement (px) carrying each event to the reference time."""
        target = self.event_positions_at(tau_ref)
        return target - np.stack([events.x, events.y], axis=1)

    def residuals_of_gt_flow(self, events: Events) -> np.ndarray:
        """Geometric residual of the true flow at each event; analytically zero."""
        intr = self.scene.intrinsics
        tau = events.t / self.scene.duration
        xn = np.stack([(events.x - intr.cx) / intr.fx,
                       (events.y - intr.cy) / intr.fy], axis=1)
        z = np.array([self.depth_at(t, p) for t, p in zip(tau, xn)])
        vel = self.motion.velocity(tau)
        u = motion_field(xn, z, vel[:, :3], vel[:, 3:])
        return geometric_residual(u, xn, vel[:, :3], vel[:, 3:])


SCENE_PRESETS = ("acceptance", "rotation", "translation")


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)


def scene_preset(name: str, seed: int = 7):
    """Bundled scene + physical motion pairs; returns (SceneSpec, omega, nu).

    omega is rad/s, nu m/s.  Build the normalized motion for generate() with
    MotionSpline.constant(omega * duration, nu * duration).
    """
    # the focal length trades off two pressures: pixel travel (and with it the
    # warped-vs-identity contrast gain) grows with f, while the field of view
    # that lets the geometric term separate rotation from translation shrinks
    # with f.  The tilted plane is what keeps translation observable at this
    # focal: a fronto-parallel plane under a narrow view produces a nearly
    # uniform translational field that a rotation absorbs to second order,
    # and the motion fit then collapses toward the trivial zero-velocity
    # minimum.  Depth varying across the view breaks that degeneracy at
    # first order.  The trimmed point count keeps a full run inside a
    # single-core budget (cost scales with the event count).
    if name == "acceptance":
        intr = CameraIntrinsics(fx=260.0, fy=260.0, cx=32.0, cy=32.0,
                                width=64, height=64)
        scene = SceneSpec(intrinsics=intr, z0=2.0, n_points=140,
                          events_per_point_per_px=3.5, duration=0.1, seed=seed,
                          tilt=(-0.707, 0.0, 0.707))
        return scene, np.array([0.0, 0.0, 0.5]), np.array([0.3, 0.0, 0.1])
    if name == "rotation":
        intr = CameraIntrinsics(fx=360.0, fy=360.0, cx=32.0, cy=32.0,
                                width=64, height=64)
        scene = SceneSpec(intrinsics=intr, z0=2.0, n_points=120,
                          events_per_point_per_px=3.0, duration=0.1, seed=seed)
        return scene, np.array([0.12, 0.08, 1.0]), np.zeros(3)
    if name == "translation":
        # stripes run exactly along the flow direction and the dots are dense
        # enough to blur into continuous ridges, so contrast alone cannot see
        # the along-stripe flow component (classic aperture problem).  The
        # tilt makes the flow magnitude vary along each stripe, which is the
        # structure the geometric term needs to recover that component.
        intr = CameraIntrinsics(fx=240.0, fy=240.0, cx=32.0, cy=32.0,
                                width=64, height=64)
        nu = np.array([0.5, 0.25, 0.0])
        scene = SceneSpec(intrinsics=intr, z0=2.0, n_points=225,
                          events_per_point_per_px=1.0, duration=0.1, seed=seed,
                          texture="stripes", stripe_angle=float(np.arctan2(1.0, 2.0)),
                          n_stripes=5, tilt=(-0.866, 0.0, 0.5))
        return scene, np.zeros(3), nu
    raise ValueError(f"unknown scene preset {name!r}; choose from {SCENE_PRESETS}")


def preset_motion(scene: SceneSpec, omega, nu) -> MotionSpline:
    """Normalized-time constant-twist spline for a physical (omega, nu)."""
    return MotionSpline.constant(np.asarray(omega, float) * scene.duration,
                                 np.asarray(nu, float) * scene.duration,
                                 t_span=scene.duration)


def _seed_pixels(scene: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    intr = scene.intrinsics
    lo = np.array([scene.margin, scene.margin])
    hi = np.array([intr.width - 1 - scene.margin, intr.height - 1 - scene.margin])
    if scene.texture == "random":
        return rng.uniform(lo, hi, size=(scene.n_points, 2))
    if scene.texture == "blobs":
        # compact clusters: contrast comes from whole blobs staying tight
        # under the correct warp instead of per-point event stacking
        centers = rng.uniform(lo, hi, size=(scene.n_blobs, 2))
        pts = np.empty((scene.n_points, 2))
        count = 0
        while count < scene.n_points:
            c = centers[int(rng.integers(scene.n_blobs))]
            p = c + rng.normal(scale=scene.blob_sigma, size=2)
            if lo[0] <= p[0] <= hi[0] and lo[1] <= p[1] <= hi[1]:
                pts[count] = p
                count += 1
        return pts
    # stripes: points packed along parallel lines so they blur into ridges
    d = np.array([np.cos(scene.stripe_angle), np.sin(scene.stripe_angle)])
    m = np.array([-d[1], d[0]])
    center = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    reach = half @ np.abs(m)           # farthest line offset still crossing the box
    span = half @ np.abs(d) + reach    # sampling range along a line
    offs = ((np.arange(scene.n_stripes) + 0.5) / scene.n_stripes * 2.0 - 1.0) * 0.9 * reach
    pts = np.empty((scene.n_points, 2))
    count = 0
    while count < scene.n_points:
        line = int(rng.integers(scene.n_stripes))
        s = float(rng.uniform(-span, span))
        p = center + s * d + offs[line] * m
        if lo[0] <= p[0] <= hi[0] and lo[1] <= p[1] <= hi[1]:
            pts[count] = p
            count += 1
    return pts


def generate(scene: SceneSpec, motion: MotionSpline):
    """Simulate the event stream; returns (Events, GroundTruth).

    motion holds twists in per-normalized-time units over the window (use
    MotionSpline.constant(omega * duration, nu * duration) for a constant
    physical twist).
    """
    intr = scene.intrinsics
    rng = np.random.Generator(np.random.Philox(scene.seed))
    px0 = _seed_pixels(scene, rng)
    pol_bits = rng.integers(0, 2, size=(INTEGRATION_STEPS + 1, scene.n_points))

    normal0 = np.array([0.0, 0.0, 1.0]) if scene.tilt is None else scene.tilt
    d0 = float(normal0[2] * scene.z0)   # depth z0 on the optical axis

    xn0 = np.stack([(px0[:, 0] - intr.cx) / intr.fx,
                    (px0[:, 1] - intr.cy) / intr.fy], axis=1)
    xh0 = np.concatenate([xn0, np.ones((len(xn0), 1))], axis=1)
    z0 = d0 / (xh0 @ normal0)
    if np.any(z0 <= 0):
        raise DegenerateSceneError("seeded points behind the camera")
    points = xh0 * z0[:, None]

    s = INTEGRATION_STEPS
    dtau = 1.0 / s
    tau = np.linspace(0.0, 1.0, s + 1)
    tracks = np.empty((s + 1, scene.n_points, 2))
    plane_n = np.empty((s + 1, 3))
    plane_d = np.empty(s + 1)
    in_frame = np.zeros((s + 1, scene.n_points), dtype=bool)

    def project(p3):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.stack([p3[:, 0] / p3[:, 2] * intr.fx + intr.cx,
                             p3[:, 1] / p3[:, 2] * intr.fy + intr.cy], axis=1)

    def visible(p3, px):
        return ((p3[:, 2] > 1e-6)
                & (px[:, 0] >= 0) & (px[:, 0] <= intr.width - 1)
                & (px[:, 1] >= 0) & (px[:, 1] <= intr.height - 1))

    def rigid_rate(t, state):
        vel = motion.velocity(min(max(t, 0.0), 1.0))
        om, nu = vel[:3], vel[3:]
        pts, n = state
        return (-np.cross(om, pts) - nu, -np.cross(om, n))

    n = normal0.copy()
    d = d0
    thresh = 1.0 / scene.events_per_point_per_px
    px = project(points)
    tracks[0] = px
    plane_n[0], plane_d[0] = n, d
    in_frame[0] = visible(points, px)
    last_px = px.copy()

    ev_t, ev_x, ev_y, ev_p = [], [], [], []
    ev_point, ev_step = [], []

    for j in range(s):
        t0 = tau[j]
        k1p, k1n = rigid_rate(t0, (points, n))
        k1d = -motion.velocity(t0)[3:] @ n
        mid = (points + 0.5 * dtau * k1p, n + 0.5 * dtau * k1n)
        k2p, k2n = rigid_rate(t0 + 0.5 * dtau, mid)
        k2d = -motion.velocity(t0 + 0.5 * dtau)[3:] @ mid[1]
        mid2 = (points + 0.5 * dtau * k2p, n + 0.5 * dtau * k2n)
        k3p, k3n = rigid_rate(t0 + 0.5 * dtau, mid2)
        k3d = -motion.velocity(t0 + 0.5 * dtau)[3:] @ mid2[1]
        end = (points + dtau * k3p, n + dtau * k3n)
        k4p, k4n = rigid_rate(t0 + dtau, end)
        k4d = -motion.velocity(min(t0 + dtau, 1.0))[3:] @ end[1]

        points = points + (dtau / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        n = n + (dtau / 6.0) * (k1n + 2 * k2n + 2 * k3n + k4n)
        d = d + (dtau / 6.0) * (k1d + 2 * k2d + 2 * k3d + k4d)

        px = project(points)
        tracks[j + 1] = px
        plane_n[j + 1], plane_d[j + 1] = n, d
        vis = visible(points, px)
        in_frame[j + 1] = vis

        if 0 < j + 1 < s:   # keep timestamps strictly inside (0, duration)
            moved = np.linalg.norm(px - last_px, axis=1) >= thresh
            fire = moved & vis
            if np.any(fire):
                idx = np.flatnonzero(fire)
                t_emit = tau[j + 1] * scene.duration
                ev_t.extend([t_emit] * len(idx))
                ev_x.extend(px[idx, 0])
                ev_y.extend(px[idx, 1])
                ev_p.extend(2 * pol_bits[j + 1, idx] - 1)
                ev_point.extend(idx)
                ev_step.extend([j + 1] * len(idx))
                last_px[idx] = px[idx]

    if in_frame[-1].sum() < 0.5 * scene.n_points:
        raise DegenerateSceneError(
            f"only {int(in_frame[-1].sum())}/{scene.n_points} points in frame at "
            "the end of the window")

    ev_t = np.asarray(ev_t, dtype=np.float64)
    ev_x = np.asarray(ev_x, dtype=np.float64)
    ev_y = np.asarray(ev_y, dtype=np.float64)
    ev_p = np.asarray(ev_p, dtype=np.int8)
    ev_point = np.asarray(ev_point, dtype=np.int64)
    ev_step = np.asarray(ev_step, dtype=np.int64)

    if scene.jitter_t > 0 and len(ev_t):
        ev_t = ev_t + rng.normal(0.0, scene.jitter_t, size=len(ev_t))
        eps = 1e-9 * scene.duration
        ev_t = np.clip(ev_t, eps, scene.duration - eps)

    order = np.lexsort((ev_point, ev_t))
    events = Events(ev_t[order], ev_x[order], ev_y[order], ev_p[order])
    gt = GroundTruth(scene=scene, motion=MotionSpline(motion.knots.copy(),
                                                      t_span=scene.duration),
                     tau=tau, plane_n=plane_n, plane_d=plane_d,
                     tracks_px=tracks, in_frame=in_frame,
                     event_point=ev_point[order], event_step=ev_step[order])
    return events, gt
