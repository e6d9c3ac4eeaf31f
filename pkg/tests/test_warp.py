import numpy as np
import pytest
from numpy.testing import assert_allclose

from emoflow import net
from emoflow import warp


def tiny_net(seed, width=16):
    return net.init_params(seed, hidden_width=width)


def hollow_net(width=16):
    """All-zero weights: forward output is exactly zero."""
    p = net.init_params(0, hidden_width=width)
    for w in p.weights:
        w[:] = 0.0
    return p


def constant_net(u0, width=16):
    """Bias-only output layer: u(t, x) = u0 everywhere."""
    p = hollow_net(width)
    p.biases[8][:] = u0
    return p


def time_field_net(width=16):
    """Exact u(t, x) = (t, 0) via pass-through wiring (t >= 0 on the domain)."""
    p = hollow_net(width)
    p.weights[0][0, 0] = 1.0           # a1 = (relu(t), 0, ...) = (t, 0, ...)
    p.weights[8][0, 0] = 1.0           # residual layers forward a1 unchanged
    return p


def space_field_net(width=16):
    """Exact u(t, x) = (x, 0) through a relu(x) - relu(-x) split."""
    p = hollow_net(width)
    p.weights[0][1, 0] = 1.0           # a1[0] = relu(x)
    p.weights[0][1, 1] = -1.0          # a1[1] = relu(-x)
    p.weights[8][0, 0] = 1.0
    p.weights[8][1, 0] = -1.0
    return p


def rand_events(rng, n):
    tn = rng.uniform(0.0, 1.0, size=n)
    xn = rng.uniform(-0.3, 0.3, size=(n, 2))
    return tn, xn


def test_step_counts_rule():
    tn = np.array([0.5, 0.4999, 0.0, 1.0, 0.25])
    counts = warp._step_counts(tn, 0.5, 8)
    # max(1, ceil(8 |dt|))
    assert list(counts) == [1, 1, 4, 4, 2]


def test_identity_when_t_equals_ref():
    p = tiny_net(0)
    xn = np.array([[0.1, -0.2], [0.0, 0.3]])
    out = warp.warp_to(p, np.array([0.5, 0.5]), xn, 0.5, warp.WarpConfig())
    assert_allclose(out, xn, atol=0)


def test_zero_flow_identity_warp():
    p = hollow_net()
    rng = np.random.default_rng(0)
    tn, xn = rand_events(rng, 30)
    for solver in ("euler", "rk4"):
        out = warp.warp_to(p, tn, xn, 0.7, warp.WarpConfig(solver=solver))
        assert_allclose(out, xn, atol=0)


def test_constant_flow_exact():
    u0 = np.array([0.05, -0.02])
    p = constant_net(u0)
    rng = np.random.default_rng(1)
    tn, xn = rand_events(rng, 40)
    for solver in ("euler", "rk4"):
        for n_steps in (1, 8):
            cfg = warp.WarpConfig(solver=solver, n_steps=n_steps)
            out = warp.warp_to(p, tn, xn, 0.25, cfg)
            expect = xn + u0 * (0.25 - tn)[:, None]
            assert_allclose(out, expect, atol=1e-15)


def test_time_field_analytic():
    # dx/dt = t  ->  x(t_ref) = x + (t_ref^2 - t_n^2) / 2
    p = time_field_net()
    rng = np.random.default_rng(2)
    tn, xn = rand_events(rng, 25)
    expect = xn.copy()
    expect[:, 0] += (1.0 - tn ** 2) / 2.0
    rk4 = warp.warp_to(p, tn, xn, 1.0, warp.WarpConfig(solver="rk4", n_steps=4))
    assert np.max(np.abs(rk4 - expect)) <= 1e-12
    errs = []
    for n_steps in (4, 8, 16, 32):
        eul = warp.warp_to(p, tn, xn, 1.0, warp.WarpConfig(solver="euler", n_steps=n_steps))
        errs.append(np.max(np.abs(eul - expect)))
    errs = np.array(errs)
    assert np.all(errs[1:] < errs[:-1])
    slope = np.polyfit(np.log([4, 8, 16, 32]), np.log(errs), 1)[0]
    assert -1.35 < slope < -0.65


def test_space_field_solver_orders():
    # dx/dt = x  ->  x(t_ref) = x exp(t_ref - t_n); positive x stays positive
    p = space_field_net()
    rng = np.random.default_rng(3)
    tn = rng.uniform(0.0, 0.4, size=25)
    xn = np.stack([rng.uniform(0.1, 0.5, size=25),
                   rng.uniform(-0.5, 0.5, size=25)], axis=1)
    expect = xn.copy()
    expect[:, 0] = xn[:, 0] * np.exp(1.0 - tn)
    slopes = {}
    for solver in ("euler", "rk4"):
        errs = []
        for n_steps in (4, 8, 16, 32):
            cfg = warp.WarpConfig(solver=solver, n_steps=n_steps)
            out = warp.warp_to(p, tn, xn, 1.0, cfg)
            errs.append(np.max(np.abs(out - expect)))
        slopes[solver] = -np.polyfit(np.log([4, 8, 16, 32]), np.log(errs), 1)[0]
    assert 0.65 < slopes["euler"] < 1.35
    assert 3.5 < slopes["rk4"] < 4.5


def test_t_ref_domain_error():
    p = hollow_net()
    with pytest.raises(ValueError):
        warp.warp_to(p, np.array([0.5]), np.zeros((1, 2)), 1.5, warp.WarpConfig())


def test_divergence_error_identifies_event():
    # u = 1e200 * relu(x): positions overflow to inf within two steps
    p = hollow_net()
    p.weights[0][1, 0] = 1.0
    p.weights[8][0, 0] = 1e200
    tn = np.array([0.5, 0.0])
    xn = np.array([[0.1, 0.0], [0.2, 0.0]])
    with pytest.raises(warp.WarpDivergence) as exc:
        warp.warp_to(p, tn, xn, 1.0, warp.WarpConfig(n_steps=8))
    assert exc.value.src_index in (0, 1)


@pytest.mark.parametrize("solver", ["euler", "rk4"])
def test_direct_gradient_finite_difference(solver):
    p = tiny_net(4)
    rng = np.random.default_rng(4)
    tn, xn = rand_events(rng, 20)
    up = rng.normal(size=(20, 2))
    cfg = warp.WarpConfig(solver=solver, n_steps=4)
    _, tape = warp.warp_to(p, tn, xn, 0.5, cfg, with_tape=True)
    grads = warp.warp_backward_direct(p, tape, up)
    flat = p.arrays()
    eps = 1e-6
    rng2 = np.random.default_rng(5)
    for _ in range(20):
        li = int(rng2.integers(len(flat)))
        arr = flat[li]
        pos = tuple(int(rng2.integers(s)) for s in arr.shape)
        old = arr[pos]
        arr[pos] = old + eps
        hi = float(np.sum(warp.warp_to(p, tn, xn, 0.5, cfg) * up))
        arr[pos] = old - eps
        lo = float(np.sum(warp.warp_to(p, tn, xn, 0.5, cfg) * up))
        arr[pos] = old
        fd = (hi - lo) / (2 * eps)
        assert_allclose(grads[li][pos], fd, rtol=1e-6, atol=1e-9)


def test_direct_gradient_zero_upstream():
    p = tiny_net(6)
    rng = np.random.default_rng(6)
    tn, xn = rand_events(rng, 10)
    cfg = warp.WarpConfig(n_steps=4)
    _, tape = warp.warp_to(p, tn, xn, 0.5, cfg, with_tape=True)
    grads = warp.warp_backward_direct(p, tape, np.zeros((10, 2)))
    assert all(np.all(g == 0) for g in grads)


def test_direct_gradient_additive_over_events():
    p = tiny_net(7)
    rng = np.random.default_rng(7)
    tn, xn = rand_events(rng, 12)
    up = rng.normal(size=(12, 2))
    cfg = warp.WarpConfig(n_steps=4)
    _, tape = warp.warp_to(p, tn, xn, 0.5, cfg, with_tape=True)
    full = warp.warp_backward_direct(p, tape, up)
    _, ta = warp.warp_to(p, tn[:5], xn[:5], 0.5, cfg, with_tape=True)
    _, tb = warp.warp_to(p, tn[5:], xn[5:], 0.5, cfg, with_tape=True)
    ga = warp.warp_backward_direct(p, ta, up[:5])
    gb = warp.warp_backward_direct(p, tb, up[5:])
    for f, a, b in zip(full, ga, gb):
        assert_allclose(f, a + b, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("solver", ["euler", "rk4"])
def test_adjoint_matches_direct(solver):
    # matched forward grids make the two routes identical up to round-off
    p = tiny_net(8)
    rng = np.random.default_rng(8)
    tn, xn = rand_events(rng, 20)
    up = rng.normal(size=(20, 2))
    cfg = warp.WarpConfig(solver=solver, n_steps=8)
    _, tape = warp.warp_to(p, tn, xn, 0.5, cfg, with_tape=True)
    gd = warp.warp_backward_direct(p, tape, up)
    ga = warp.warp_backward_adjoint(p, tape, up)
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(gd, ga))
    assert worst <= 1e-6


def test_adjoint_constant_field_equals_direct():
    # zero spatial Jacobian: the adjoint state stays constant
    p = constant_net(np.array([0.03, -0.01]))
    rng = np.random.default_rng(9)
    tn, xn = rand_events(rng, 15)
    up = rng.normal(size=(15, 2))
    cfg = warp.WarpConfig(solver="euler", n_steps=8)
    _, tape = warp.warp_to(p, tn, xn, 0.3, cfg, with_tape=True)
    gd = warp.warp_backward_direct(p, tape, up)
    ga = warp.warp_backward_adjoint(p, tape, up)
    for a, b in zip(gd, ga):
        assert_allclose(a, b, atol=1e-15)


def test_adjoint_linear_in_upstream():
    p = tiny_net(10)
    rng = np.random.default_rng(10)
    tn, xn = rand_events(rng, 10)
    up = rng.normal(size=(10, 2))
    cfg = warp.WarpConfig(solver="rk4", n_steps=4)
    _, tape = warp.warp_to(p, tn, xn, 0.5, cfg, with_tape=True)
    g1 = warp.warp_backward_adjoint(p, tape, up)
    g3 = warp.warp_backward_adjoint(p, tape, 3.0 * up)
    for a, b in zip(g1, g3):
        assert_allclose(b, 3.0 * a, rtol=1e-12, atol=1e-15)


def test_warp_backward_dispatch():
    p = tiny_net(11)
    rng = np.random.default_rng(11)
    tn, xn = rand_events(rng, 8)
    up = rng.normal(size=(8, 2))
    for mode in ("direct", "adjoint"):
        cfg = warp.WarpConfig(n_steps=4, backprop=mode)
        _, tape = warp.warp_to(p, tn, xn, 0.5, cfg, with_tape=True)
        g = warp.warp_backward(p, tape, up, cfg)
        assert len(g) == 18


def test_config_validation():
    with pytest.raises(ValueError):
        warp.WarpConfig(solver="dopri5")
    with pytest.raises(ValueError):
        warp.WarpConfig(n_steps=0)
    with pytest.raises(ValueError):
        warp.WarpConfig(backprop="forward")


def test_point_tracks_rows(tmp_path):
    p = constant_net(np.array([0.02, 0.0]))
    tn = np.array([0.0, 0.75])
    xn = np.array([[0.1, 0.1], [-0.1, 0.0]])
    cfg = warp.WarpConfig(n_steps=8)
    rows = warp.point_tracks(p, tn, xn, 0.5, cfg)
    counts = warp._step_counts(tn, 0.5, 8)
    assert len(rows) == int(np.sum(counts + 1))
    by_src = {}
    for src, t, x, y in rows:
        by_src.setdefault(src, []).append((t, x, y))
    # each track starts at the source and ends at t_ref
    for i in (0, 1):
        track = by_src[i]
        assert track[0][0] == tn[i]
        assert track[-1][0] == pytest.approx(0.5)
        assert_allclose(track[0][1:], xn[i], atol=0)
    path = tmp_path / "tracks.csv"
    warp.write_tracks_csv(path, rows)
    header = path.read_text().splitlines()[0]
    assert header == "src_index,t,x,y"
