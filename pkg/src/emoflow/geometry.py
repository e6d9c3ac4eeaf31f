"""Differential geometry linking optical flow to instantaneous camera motion.

All functions work in normalized (calibrated) image coordinates, where a pixel
maps to the homogeneous point x_hat = [x, y, 1].  A camera twist is the pair
(omega, nu): angular and linear velocity of the camera expressed in its own
frame.  Everything is float64 numpy and batch-friendly: point arguments accept
shape (2,) or (N, 2), twists accept (3,) or (N, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Twist:
    """Instantaneous rigid-body velocity (angular, linear)."""

    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.nu = np.asarray(self.nu, dtype=np.float64).reshape(3)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])


def homogeneous(xy: np.ndarray) -> np.ndarray:
    """Append w=1: (..., 2) -> (..., 3)."""
    xy = np.asarray(xy, dtype=np.float64)
    return np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x with [v]x w = v x w.  Batched over leading dims."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def a_matrix(xy: np.ndarray) -> np.ndarray:
    """Translational flow Jacobian A(x_hat); motion field u = (1/Z) A nu + B omega.

    Rows: [-1, 0, x], [0, -1, y], [0, 0, 0].  A(x_hat) x_hat = 0 for every point.
    """
    xy = np.asarray(xy, dtype=np.float64)
    out = np.zeros(xy.shape[:-1] + (3, 3))
    out[..., 0, 0] = -1.0
    out[..., 0, 2] = xy[..., 0]
    out[..., 1, 1] = -1.0
    out[..., 1, 2] = xy[..., 1]
    return out


def b_matrix(xy: np.ndarray) -> np.ndarray:
    """Rotational flow Jacobian B(x_hat); depth-independent part of the motion field.

    Rows: [xy, -(1+x^2), y], [1+y^2, -xy, -x], [0, 0, 0].
    """
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    out = np.zeros(xy.shape[:-1] + (3, 3))
    out[..., 0, 0] = x * y
    out[..., 0, 1] = -(1.0 + x * x)
    out[..., 0, 2] = y
    out[..., 1, 0] = 1.0 + y * y
    out[..., 1, 1] = -x * y
    out[..., 1, 2] = -x
    return out


def motion_field(xy: np.ndarray, z: np.ndarray, omega: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Image velocity of the scene point behind each pixel, (..., 2).

    u = (1/Z) A(x_hat) nu + B(x_hat) omega, in normalized coordinates per unit
    time.  z broadcasts against the leading dims of xy.
    """
    xy = np.asarray(xy, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    a = a_matrix(xy)
    b = b_matrix(xy)
    trans = np.einsum("...ij,...j->...i", a, np.broadcast_to(nu, xy.shape[:-1] + (3,)))
    rot = np.einsum("...ij,...j->...i", b, np.broadcast_to(omega, xy.shape[:-1] + (3,)))
    u3 = trans / z[..., None] + rot
    return u3[..., :2]


def s_matrix(omega: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Symmetrized second-order twist term s = ([nu]x [omega]x + [omega]x [nu]x) / 2."""
    so = skew(omega)
    sn = skew(nu)
    return 0.5 * (sn @ so + so @ sn)


@dataclass
class ResidualGrads:
    """Per-sample partial derivatives of the epipolar-rate residual."""

    d_u: np.ndarray      # (..., 2) w.r.t. the flow vector
    d_omega: np.ndarray  # (..., 3)
    d_nu: np.ndarray     # (..., 3)


def geometric_residual(u: np.ndarray, xy: np.ndarray, omega: np.ndarray, nu: np.ndarray,
                       with_grads: bool = False):
    """Depth-free consistency residual between flow and camera twist.

    r = u_hat^T [nu]x x_hat - x_hat^T s x_hat with u_hat = [u, v, 0] and
    x_hat = [x, y, 1].  Vanishes exactly when u equals the rigid motion field
    at x_hat for (omega, nu), at any positive depth.

    Evaluated through the equivalent cross-product form
        r = (nu x x_hat) . (u_hat + omega x x_hat)
    which also yields the analytic derivatives:
        dr/du     = (nu x x_hat)[:2]
        dr/domega = x_hat x (nu x x_hat)
        dr/dnu    = x_hat x (u_hat + omega x x_hat)

    Returns r with shape (...,), or (r, ResidualGrads) when with_grads is set.
    """
    u = np.asarray(u, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64)
    xh = homogeneous(xy)
    uh = np.concatenate([u, np.zeros(u.shape[:-1] + (1,))], axis=-1)
    c = np.cross(np.broadcast_to(nu, xh.shape), xh)      # nu x x_hat
    d = np.cross(np.broadcast_to(omega, xh.shape), xh)   # omega x x_hat
    w = uh + d
    r = np.sum(c * w, axis=-1)
    if not with_grads:
        return r
    grads = ResidualGrads(
        d_u=c[..., :2].copy(),
        d_omega=np.cross(xh, c),
        d_nu=np.cross(xh, w),
    )
    return r, grads
