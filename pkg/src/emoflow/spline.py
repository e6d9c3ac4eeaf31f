"""Cubic B-spline camera-motion model over a normalized time window.

The twist trajectory [omega(t); nu(t)] on t in [0, 1] is a uniform cubic
B-spline with four control knots beta in R^{4x6} (columns wx wy wz vx vy vz).
With basis weights B_i(t), velocity(t) = sum_i B_i(t) beta_i, so the velocity
is linear in the knots and d velocity / d beta_i = B_i(t) I.

Knot values are per unit of normalized time; to_physical rescales a twist to
per-second units for a window spanning t_span seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Twist

# Uniform cubic B-spline coefficient matrix: basis(t) = (1/6) [t^3 t^2 t 1] M.
BASIS_M = np.array(
    [
        [-1.0, 3.0, -3.0, 1.0],
        [3.0, -6.0, 3.0, 0.0],
        [-3.0, 0.0, 3.0, 0.0],
        [1.0, 4.0, 1.0, 0.0],
    ]
)

N_KNOTS = 4


def _check_domain(t: np.ndarray) -> None:
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("normalized time must lie in [0, 1]")


def basis(t) -> np.ndarray:
    """Basis weights B_0..B_3 at t; shape (4,) for scalar t, (N, 4) for arrays.

    The weights sum to 1 (partition of unity).  B(0) = (1, 4, 1, 0)/6 and
    B(1) = (0, 1, 4, 1)/6.
    """
    t = np.asarray(t, dtype=np.float64)
    _check_domain(t)
    powers = np.stack([t ** 3, t ** 2, t, np.ones_like(t)], axis=-1)
    return (powers @ BASIS_M) / 6.0


def _cumulative_weights(t):
    """Weights of the telescoped form beta_0 + sum_j C_j(t) (beta_j - beta_{j-1})."""
    t = np.asarray(t, dtype=np.float64)
    _check_domain(t)
    c1 = (5.0 + 3.0 * t - 3.0 * t * t + t ** 3) / 6.0
    c2 = (1.0 + 3.0 * t + 3.0 * t * t - 2.0 * t ** 3) / 6.0
    c3 = t ** 3 / 6.0
    return c1, c2, c3


@dataclass
class MotionSpline:
    """Four-knot cubic B-spline twist trajectory on normalized time [0, 1].

    Knot units are per normalized time; t_span records the physical window
    length so to_physical can rescale to per-second twists.
    """

    knots: np.ndarray = field(default_factory=lambda: np.zeros((N_KNOTS, 6)))
    t_span: float = 1.0

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64)
        if self.knots.shape != (N_KNOTS, 6):
            raise ValueError(f"knots must have shape {(N_KNOTS, 6)}, got {self.knots.shape}")
        if not self.t_span > 0:
            raise ValueError("t_span must be positive")

    @classmethod
    def constant(cls, omega, nu, t_span: float = 1.0) -> "MotionSpline":
        """Spline whose velocity equals the given twist at every t."""
        row = np.concatenate([np.asarray(omega, float).reshape(3),
                              np.asarray(nu, float).reshape(3)])
        return cls(np.tile(row, (N_KNOTS, 1)), t_span=t_span)

    def velocity(self, t) -> np.ndarray:
        """Twist at time t: shape (6,) for scalar t, (N, 6) for arrays.

        Uses the telescoped cumulative form so identical knots reproduce that
        twist exactly (the partition-of-unity residual never enters).
        """
        c1, c2, c3 = _cumulative_weights(t)
        k = self.knots
        d1, d2, d3 = k[1] - k[0], k[2] - k[1], k[3] - k[2]
        return (k[0]
                + np.multiply.outer(c1, d1)
                + np.multiply.outer(c2, d2)
                + np.multiply.outer(c3, d3))

    def twist(self, t: float) -> Twist:
        v = self.velocity(float(t))
        return Twist(v[:3], v[3:])

    def velocity_grad(self, t) -> np.ndarray:
        """d velocity(t) / d knots: the basis weights, shape (..., 4).

        Component c of the twist depends only on knot column c, with weight
        B_i(t) on knot i.
        """
        return basis(t)

    def to_physical(self, t, t_span: float | None = None) -> np.ndarray:
        """Twist at normalized t in per-second units for a t_span-second window."""
        span = self.t_span if t_span is None else float(t_span)
        if not span > 0:
            raise ValueError("t_span must be positive")
        return self.velocity(t) / span


def write_trajectory_csv(path, spline: MotionSpline, t_span: float | None = None,
                         n_samples: int = 101, t_offset: float = 0.0) -> None:
    """Sample the spline and write per-second twists as t,wx,wy,wz,vx,vy,vz.

    t column is in seconds, offset by t_offset (segment start time).
    """
    if t_span is None:
        t_span = spline.t_span
    ts = np.linspace(0.0, 1.0, int(n_samples))
    v = spline.to_physical(ts, t_span)
    with open(path, "w") as f:
        f.write("t,wx,wy,wz,vx,vy,vz\n")
        for tn, row in zip(ts, v):
            cols = ",".join(format(x, ".17g") for x in row)
            f.write(f"{format(t_offset + tn * t_span, '.17g')},{cols}\n")
