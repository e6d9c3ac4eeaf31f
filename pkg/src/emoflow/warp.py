"""Event transport along the learned flow field.

Each event's position obeys dx/dt = NN(t, x) starting from its own (t_n, x_n);
warping integrates that ODE to a shared reference time t_ref, forward or
backward in time.  Gradients of any scalar loss on the warped positions reach
the network parameters by one of two routes:

* direct: reverse-mode through the unrolled solver steps (the chain rule on
  the exact program that produced x_ref);
* adjoint: the adjoint state a(t) = dL/dx(t) is integrated backward from
  t_ref, and dL/dtheta accumulates the quadrature of a . dNN/dtheta along the
  trajectory.

Both routes share the forward step grid (positions and activations are taped),
so they agree to round-off for either solver; that agreement is a tested
contract, with the direct route serving as the oracle.

Events are integrated in groups of equal step count; the count scales with the
time distance, n_k = max(1, ceil(n_steps * |t_ref - t_n|)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import net as net_mod

SOLVERS = ("euler", "rk4")
BACKPROP_MODES = ("direct", "adjoint")


class WarpDivergence(RuntimeError):
    """Non-finite event position during integration."""

    def __init__(self, src_index: int, t: float):
        self.src_index = int(src_index)
        self.t = float(t)
        super().__init__(f"event {src_index} diverged near t={t:.6g}")


@dataclass
class WarpConfig:
    solver: str = "euler"
    n_steps: int = 8
    backprop: str = "direct"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.backprop not in BACKPROP_MODES:
            raise ValueError(f"backprop must be one of {BACKPROP_MODES}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


class WarpedEvent(NamedTuple):
    x_ref: np.ndarray
    src_index: int
    t_src: float


@dataclass
class _Group:
    """Events sharing one step count; h is per-event (signed) step size."""

    idx: np.ndarray            # (B,) indices into the original event order
    h: np.ndarray              # (B,)
    n_steps: int
    caches: list = field(default_factory=list)   # per step: one cache (euler) or 4 (rk4)


@dataclass
class WarpTape:
    """Forward-pass record consumed by the backward routines."""

    n_events: int
    t_ref: float
    solver: str
    groups: list = field(default_factory=list)
    x_ref: np.ndarray | None = None


def _step_counts(tn: np.ndarray, t_ref: float, n_steps: int) -> np.ndarray:
    return np.maximum(1, np.ceil(n_steps * np.abs(t_ref - tn)).astype(np.int64))


def _check_finite(x: np.ndarray, idx: np.ndarray, t) -> None:
    ok = np.isfinite(x).all(axis=1)
    if not ok.all():
        bad = int(np.argmin(ok))
        tbad = float(t[bad]) if np.ndim(t) else float(t)
        raise WarpDivergence(idx[bad], tbad)


def warp_to(params, tn: np.ndarray, xn: np.ndarray, t_ref: float, cfg: WarpConfig,
            with_tape: bool = False):
    """Integrate every event to t_ref; returns x_ref (N, 2) (and a tape if asked).

    tn (N,) and xn (N, 2) are normalized times/coordinates.  t_ref must lie in
    [0, 1].  Events at t_ref pass through unchanged.
    """
    tn = np.asarray(tn, dtype=np.float64)
    xn = np.asarray(xn, dtype=np.float64)
    if not 0.0 <= t_ref <= 1.0:
        raise ValueError("t_ref must lie in [0, 1]")
    n = len(tn)
    x_ref = np.empty((n, 2))
    tape = WarpTape(n_events=n, t_ref=float(t_ref), solver=cfg.solver)

    counts = _step_counts(tn, t_ref, cfg.n_steps)
    for n_k in np.unique(counts):
        idx = np.flatnonzero(counts == n_k)
        h = (t_ref - tn[idx]) / n_k
        group = _Group(idx=idx, h=h, n_steps=int(n_k))
        x = xn[idx].copy()
        t = tn[idx].copy()
        for j in range(int(n_k)):
            if cfg.solver == "euler":
                x = _euler_step(params, t, x, h, group, with_tape)
            else:
                x = _rk4_step(params, t, x, h, group, with_tape)
            t = tn[idx] + (j + 1) * h
            _check_finite(x, idx, t)
        x_ref[idx] = x
        if with_tape:
            tape.groups.append(group)
    if with_tape:
        tape.x_ref = x_ref
        return x_ref, tape
    return x_ref


def _eval(params, t, x, group, keep):
    q = np.concatenate([t[:, None], x], axis=1)
    if keep:
        u, cache = net_mod.forward(params, q, with_cache=True)
        group.caches.append(cache)
    else:
        u = net_mod.forward(params, q)
    return u


def _euler_step(params, t, x, h, group, keep):
    u = _eval(params, t, x, group, keep)
    return x + h[:, None] * u


def _rk4_step(params, t, x, h, group, keep):
    hh = h[:, None]
    k1 = _eval(params, t, x, group, keep)
    k2 = _eval(params, t + 0.5 * h, x + 0.5 * hh * k1, group, keep)
    k3 = _eval(params, t + 0.5 * h, x + 0.5 * hh * k2, group, keep)
    k4 = _eval(params, t + h, x + hh * k3, group, keep)
    return x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _accumulate(total, grads):
    for a, g in zip(total, grads):
        a += g


def warp_backward_direct(params, tape: WarpTape, upstream: np.ndarray):
    """Chain rule through the recorded solver steps.

    upstream is dL/dx_ref, shape (N, 2).  Returns the gradient of
    sum_k upstream_k . x_ref_k w.r.t. the parameters, as a flat array list
    matching params.arrays().
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    total = net_mod.zero_grads(params)
    for group in tape.groups:
        v = upstream[group.idx].copy()
        hh = group.h[:, None]
        if tape.solver == "euler":
            for j in range(group.n_steps - 1, -1, -1):
                cache = group.caches[j]
                grads, gq = net_mod.backward(params, cache, hh * v)
                _accumulate(total, grads)
                v = v + gq[:, 1:3]
        else:
            for j in range(group.n_steps - 1, -1, -1):
                c1, c2, c3, c4 = group.caches[4 * j:4 * j + 4]
                dk4 = (hh / 6.0) * v
                g4, gx4 = net_mod.backward(params, c4, dk4)
                dx4 = gx4[:, 1:3]
                dk3 = (hh / 3.0) * v + hh * dx4
                g3, gx3 = net_mod.backward(params, c3, dk3)
                dx3 = gx3[:, 1:3]
                dk2 = (hh / 3.0) * v + 0.5 * hh * dx3
                g2, gx2 = net_mod.backward(params, c2, dk2)
                dx2 = gx2[:, 1:3]
                dk1 = (hh / 6.0) * v + 0.5 * hh * dx2
                g1, gx1 = net_mod.backward(params, c1, dk1)
                dx1 = gx1[:, 1:3]
                for g in (g4, g3, g2, g1):
                    _accumulate(total, g)
                v = v + dx1 + dx2 + dx3 + dx4
    return total


def warp_backward_adjoint(params, tape: WarpTape, upstream: np.ndarray):
    """Adjoint-state route: integrate a(t) backward and quadrature dL/dtheta.

    The adjoint obeys da/dt = -(dNN/dx)^T a from a(t_ref) = dL/dx_ref down to
    each event's source time, on the same step grid the forward pass used;
    dL/dtheta accumulates the integral of a . dNN/dtheta along the way.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    total = net_mod.zero_grads(params)
    for group in tape.groups:
        a = upstream[group.idx].copy()
        hh = group.h[:, None]
        if tape.solver == "euler":
            # One backward-Euler sweep per forward step, partials evaluated at
            # the forward points: reproduces the unrolled chain rule exactly.
            for j in range(group.n_steps - 1, -1, -1):
                cache = group.caches[j]
                grads, gq = net_mod.backward(params, cache, hh * a)
                _accumulate(total, grads)
                a = a + gq[:, 1:3]
        else:
            # One adjoint RK4 step per forward step: the stage adjoints lam_i
            # follow the transposed stage coupling of the forward scheme, with
            # partials at the taped stage positions.  Sharing the grid this
            # way keeps the route equal to the unrolled chain rule to
            # round-off; theta picks up the Eq.-5 quadrature sum lam_i . df/dtheta.
            for j in range(group.n_steps - 1, -1, -1):
                c1, c2, c3, c4 = group.caches[4 * j:4 * j + 4]
                lam4 = (hh / 6.0) * a
                q4, j4 = net_mod.backward(params, c4, lam4)
                lam3 = (hh / 3.0) * a + hh * j4[:, 1:3]
                q3, j3 = net_mod.backward(params, c3, lam3)
                lam2 = (hh / 3.0) * a + 0.5 * hh * j3[:, 1:3]
                q2, j2 = net_mod.backward(params, c2, lam2)
                lam1 = (hh / 6.0) * a + 0.5 * hh * j2[:, 1:3]
                q1, j1 = net_mod.backward(params, c1, lam1)
                for q in (q4, q3, q2, q1):
                    _accumulate(total, q)
                a = a + j1[:, 1:3] + j2[:, 1:3] + j3[:, 1:3] + j4[:, 1:3]
        if not all(np.isfinite(g).all() for g in total) or not np.isfinite(a).all():
            raise WarpDivergence(group.idx[0], tape.t_ref)
    return total


def warp_backward(params, tape: WarpTape, upstream: np.ndarray, cfg: WarpConfig):
    if cfg.backprop == "adjoint":
        return warp_backward_adjoint(params, tape, upstream)
    return warp_backward_direct(params, tape, upstream)


def as_warped_events(x_ref: np.ndarray, tn: np.ndarray) -> list:
    return [WarpedEvent(x_ref[i].copy(), i, float(tn[i])) for i in range(len(tn))]


def point_tracks(params, tn: np.ndarray, xn: np.ndarray, t_ref: float,
                 cfg: WarpConfig) -> list:
    """Per-event integration polylines: rows (src_index, t, x, y).

    Includes the source point and every solver step endpoint, ending at t_ref.
    """
    tn = np.asarray(tn, dtype=np.float64)
    xn = np.asarray(xn, dtype=np.float64)
    counts = _step_counts(tn, t_ref, cfg.n_steps)
    rows = []
    tracks = {}
    for n_k in np.unique(counts):
        idx = np.flatnonzero(counts == n_k)
        h = (t_ref - tn[idx]) / n_k
        x = xn[idx].copy()
        t = tn[idx].copy()
        pts = [x.copy()]
        ts = [t.copy()]
        group = _Group(idx=idx, h=h, n_steps=int(n_k))
        for j in range(int(n_k)):
            if cfg.solver == "euler":
                x = _euler_step(params, t, x, h, group, False)
            else:
                x = _rk4_step(params, t, x, h, group, False)
            t = tn[idx] + (j + 1) * h
            _check_finite(x, idx, t)
            pts.append(x.copy())
            ts.append(t.copy())
        for b, src in enumerate(idx):
            tracks[int(src)] = [(float(ts[j][b]), float(pts[j][b, 0]), float(pts[j][b, 1]))
                                for j in range(len(pts))]
    for src in sorted(tracks):
        for t, x, y in tracks[src]:
            rows.append((src, t, x, y))
    return rows


def write_tracks_csv(path, rows) -> None:
    with open(path, "w") as f:
        f.write("src_index,t,x,y\n")
        for src, t, x, y in rows:
            f.write(f"{src},{format(t, '.17g')},{format(x, '.17g')},{format(y, '.17g')}\n")
