"""Implicit flow-field network: u = NN(t, x) with hand-rolled reverse mode.

Fixed nine-layer fully-connected graph:

    a1 = relu(q W1 + b1)                      q = [t, x, y], width 3 -> h
    ai = relu(a_{i-1} Wi + bi + a_{i-1})      i = 2..5, h -> h, residual add
    a6 = relu([a5, q] W6 + b6 + a5)           (h+3) -> h, input re-injected
    ai = relu(a_{i-1} Wi + bi + a_{i-1})      i = 7..8
    u  = a8 W9 + b9                           h -> 2, no activation

Hidden width h defaults to 256 and is configurable for tests.  No positional
encoding: queries enter raw.  Everything is float64; weight matrices are
stored (fan_in, fan_out) so batches of queries multiply on the left.

backward() returns exact reverse-mode gradients of upstream . u with respect
to both the parameters and the query, which the event-warping adjoint needs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

N_LAYERS = 9
IN_DIM = 3
OUT_DIM = 2
CHECKPOINT_MAGIC = b"EMF1"


@dataclass
class FlowNetParams:
    """Per-layer weights (fan_in, fan_out) and biases (fan_out,)."""

    weights: list
    biases: list
    hidden_width: int

    def check(self) -> None:
        h = self.hidden_width
        expect = layer_dims(h)
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ValueError(f"expected {N_LAYERS} layers")
        for i, ((fi, fo), w, b) in enumerate(zip(expect, self.weights, self.biases)):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(f"layer {i + 1}: want W{(fi, fo)} b{(fo,)}, "
                                 f"got W{w.shape} b{b.shape}")

    def copy(self) -> "FlowNetParams":
        return FlowNetParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.hidden_width)

    def arrays(self) -> list:
        """Flat parameter list (W1, b1, ..., W9, b9), aliasing the live arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def layer_dims(hidden_width: int) -> list:
    h = hidden_width
    dims = [(IN_DIM, h)] + [(h, h)] * 4 + [(h + IN_DIM, h)] + [(h, h)] * 2 + [(h, OUT_DIM)]
    return dims


def n_params(hidden_width: int) -> int:
    return sum(fi * fo + fo for fi, fo in layer_dims(hidden_width))


OUT_INIT_SCALE = 0.05


def init_params(seed: int, hidden_width: int = 256) -> FlowNetParams:
    """Fan-in-scaled uniform weights (half-width 1/(2 sqrt(fan_in))), zero biases.

    The residual pathway grows activations through depth, so the hidden scale
    is halved and the output layer is shrunk further by OUT_INIT_SCALE.  The
    initial field then sits well inside |u| <= 1 on the working domain and
    warping starts near the identity.  Uses the counter-based Philox generator
    so initialization is reproducible across platforms for a given seed.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    weights, biases = [], []
    dims = layer_dims(hidden_width)
    for li, (fi, fo) in enumerate(dims):
        bound = 0.5 / np.sqrt(fi)
        if li == len(dims) - 1:
            bound *= OUT_INIT_SCALE
        weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return FlowNetParams(weights, biases, hidden_width)


def zero_grads(params: FlowNetParams) -> list:
    """Zero arrays shaped like params.arrays()."""
    return [np.zeros_like(a) for a in params.arrays()]


def forward(params: FlowNetParams, q: np.ndarray, with_cache: bool = False):
    """Evaluate the network; q is (3,) or (B, 3) as [t, x, y].

    With with_cache, also returns the hidden activations needed by backward.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    Q = q[None, :] if single else q
    W, B = params.weights, params.biases

    a = np.maximum(Q @ W[0] + B[0], 0.0)
    acts = [a]
    for i in range(1, 8):
        if i == 5:
            z = np.concatenate([a, Q], axis=1) @ W[5] + B[5] + a
        else:
            z = a @ W[i] + B[i] + a
        a = np.maximum(z, 0.0)
        acts.append(a)
    u = a @ W[8] + B[8]

    if single:
        u = u[0]
    if with_cache:
        return u, (Q, acts)
    return u


def backward(params: FlowNetParams, cache, upstream: np.ndarray):
    """Reverse-mode gradients of sum_b upstream_b . u_b.

    cache is the (Q, acts) pair from forward(..., with_cache=True); upstream
    has shape (B, 2) (or (2,) for a single query).  Returns (grads, gq) with
    grads a flat list matching params.arrays() (summed over the batch) and gq
    of shape (B, 3): per-query gradient w.r.t. [t, x, y].
    """
    Q, acts = cache
    G = np.asarray(upstream, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    W = params.weights
    h = params.hidden_width

    grads = [None] * (2 * N_LAYERS)

    # output layer
    a8 = acts[7]
    grads[16] = a8.T @ G
    grads[17] = G.sum(axis=0)
    d = G @ W[8].T

    for i in range(7, 0, -1):
        dz = np.where(acts[i] > 0.0, d, 0.0)
        prev = acts[i - 1]
        if i == 5:
            cat = np.concatenate([prev, Q], axis=1)
            grads[2 * i] = cat.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            dcat = dz @ W[5].T
            d = dcat[:, :h] + dz
            gq = dcat[:, h:].copy()
        else:
            grads[2 * i] = prev.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            d = dz @ W[i].T + dz

    dz = np.where(acts[0] > 0.0, d, 0.0)
    grads[0] = Q.T @ dz
    grads[1] = dz.sum(axis=0)
    gq += dz @ W[0].T
    return grads, gq


def forward_and_grad_x(params: FlowNetParams, q: np.ndarray, upstream: np.ndarray):
    """Convenience: forward plus gradient w.r.t. the spatial input only."""
    u, cache = forward(params, q, with_cache=True)
    grads, gq = backward(params, cache, upstream)
    return u, grads, gq[:, 1:3]


def save_checkpoint(path, params: FlowNetParams) -> None:
    """Binary checkpoint: magic, hidden width, layer shapes, float64 payload."""
    params.check()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", params.hidden_width, N_LAYERS))
        for w in params.weights:
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in zip(params.weights, params.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> FlowNetParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        hidden_width, n_layers = struct.unpack("<II", f.read(8))
        if n_layers != N_LAYERS:
            raise ValueError(f"{path}: expected {N_LAYERS} layers, got {n_layers}")
        shapes = [struct.unpack("<II", f.read(8)) for _ in range(n_layers)]
        if shapes != [tuple(s) for s in layer_dims(hidden_width)]:
            raise ValueError(f"{path}: layer shapes inconsistent with hidden width "
                             f"{hidden_width}")
        weights, biases = [], []
        for fi, fo in shapes:
            w = np.frombuffer(f.read(8 * fi * fo), dtype="<f8").reshape(fi, fo)
            b = np.frombuffer(f.read(8 * fo), dtype="<f8")
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return FlowNetParams(weights, biases, hidden_width)
