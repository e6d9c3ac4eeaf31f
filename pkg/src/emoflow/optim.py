"""Optimization utilities: AdamW, learning-rate schedules, early stopping.

AdamW here is the decoupled formulation: bias-corrected Adam moments drive the
gradient step, while weight decay multiplies parameters by (1 - lr * decay)
independently of the gradient.  State lives beside a flat list of parameter
arrays and updates them in place, in list order, so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("constant", "exponential", "cosine")


@dataclass
class AdamWState:
    """Moment accumulators for one parameter group (a flat list of arrays)."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure(self, params: list) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise ValueError("optimizer state does not match parameter count")


def adamw_step(state: AdamWState, params: list, grads: list, lr: float) -> None:
    """One in-place AdamW update over a flat list of parameter arrays."""
    state.ensure(params)
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameter count")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class LrSchedule:
    kind: str = "constant"
    lr_start: float = 1e-3
    lr_end: float = 1e-3
    total_iters: int = 1000

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"kind must be one of {SCHEDULE_KINDS}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")


def lr_at(sched: LrSchedule, iteration: int) -> float:
    """Learning rate at an iteration in [0, total_iters]."""
    frac = iteration / sched.total_iters
    if sched.kind == "constant":
        return sched.lr_start
    if sched.kind == "exponential":
        return sched.lr_start * (sched.lr_end / sched.lr_start) ** frac
    return sched.lr_end + 0.5 * (sched.lr_start - sched.lr_end) * (1.0 + np.cos(np.pi * frac))


@dataclass
class EarlyStop:
    """Patience controller on the monitored loss, active only after warmup.

    An iteration counts as an improvement when best - loss >= min_delta
    (boundary inclusive); anything less increments staleness, and staleness
    reaching patience stops the run.
    """

    patience: int = 45
    min_delta: float = 1e-3
    warmup: int = 300
    best: float | None = None
    stale: int = 0


def early_stop_update(es: EarlyStop, iteration: int, loss: float) -> bool:
    """Record one iteration; returns True to continue, False to stop."""
    if iteration < es.warmup:
        return True
    if es.best is None or es.best - loss >= es.min_delta:
        es.best = loss
        es.stale = 0
        return True
    es.stale += 1
    return es.stale < es.patience
