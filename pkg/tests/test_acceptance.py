"""End-to-end acceptance checks for the joint flow + egomotion estimator.

Each test pins one externally visible guarantee: exact algebra (depth
elimination, spline partition of unity), gradient fidelity (finite
differences, adjoint vs unrolled), and closed-loop recovery on synthetic
scenes with analytic ground truth.  The recovery runs train real networks,
so this module is the slow part of the suite; the shared fixtures keep it
to one full training run per scene.
"""

import dataclasses
import time

import numpy as np
import numpy.testing as npt
import pytest
import threadpoolctl

import emoflow as ef
from emoflow import losses, metrics, net, synth
from emoflow.events import segment_stream, normalize_segment
from emoflow.geometry import a_matrix, homogeneous
from emoflow.losses import SamplingPlan, temporal_neighbors, total_loss
from emoflow.net import init_params
from emoflow.optim import EarlyStop
from emoflow.spline import MotionSpline, basis
from emoflow.warp import WarpConfig, warp_to

threadpoolctl.threadpool_limits(limits=1)


# -- exact algebra ------------------------------------------------------------


def test_depth_elimination_identity():
    # the translational flow term is orthogonal to nu x x_hat for every nu
    # and every image point, which is what removes depth from the residual
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    nu = rng.normal(size=(100_000, 3))
    xy = rng.uniform(-2.0, 2.0, size=(100_000, 2))
    xh = homogeneous(xy)
    a_nu = np.einsum("nij,nj->ni", a_matrix(xy), nu)
    cross = np.cross(nu, xh)
    worst = np.max(np.abs(np.einsum("ni,ni->n", a_nu, cross)))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-12
    assert elapsed < 5.0


def test_spline_contract():
    t = np.linspace(0.0, 1.0, 1001)
    b = basis(t)
    npt.assert_array_less(np.abs(b.sum(axis=-1) - 1.0), 1e-14 + np.zeros(len(t)))

    const = MotionSpline(np.tile([[0.3, -0.2, 0.1, 0.05, 0.0, -0.4]], (4, 1)),
                         t_span=1.0)
    v = const.velocity(t)
    npt.assert_array_equal(v, np.broadcast_to([0.3, -0.2, 0.1, 0.05, 0.0, -0.4],
                                              v.shape))

    # d velocity / d knot equals the basis weight, checked by displacement
    rng = np.random.default_rng(11)
    knots = rng.normal(size=(4, 6))
    spline = MotionSpline(knots.copy(), t_span=1.0)
    h = 1e-8
    for t_probe in (0.0, 0.31, 0.77, 1.0):
        w = basis(t_probe)
        for k in range(4):
            pert = knots.copy()
            pert[k, 2] += h
            fd = (MotionSpline(pert, t_span=1.0).velocity(t_probe)[2]
                  - spline.velocity(t_probe)[2]) / h
            npt.assert_allclose(fd, w[k], rtol=1e-6, atol=1e-7)


# -- gradient fidelity --------------------------------------------------------


def small_instance(n_events=50, width=16, seed=9):
    rng = np.random.default_rng(seed)
    tn = np.sort(rng.uniform(0.0, 1.0, n_events))
    xn = rng.uniform(-0.25, 0.25, size=(n_events, 2))
    params = init_params(seed, width)
    spline = MotionSpline(rng.uniform(-0.3, 0.3, size=(4, 6)), t_span=1.0)
    intr = ef.CameraIntrinsics(fx=60.0, fy=60.0, cx=16.0, cy=16.0,
                               width=32, height=32)
    plan = SamplingPlan(t_ref=0.5, neigh_idx=np.arange(n_events),
                        geom_idx=np.arange(n_events))
    return params, spline, tn, xn, intr, plan


def test_total_loss_gradients_match_finite_differences():
    t0 = time.perf_counter()
    cfg = WarpConfig(solver="euler", n_steps=4, backprop="adjoint")
    params, spline, tn, xn, intr, plan = small_instance()
    _, g_theta, g_knots, _ = total_loss(params, spline, tn, xn, plan, intr,
                                        warp_cfg=cfg)

    def value():
        return total_loss(params, spline, tn, xn, plan, intr,
                          warp_cfg=cfg)[0].total

    # relative error is taken against the gradient scale of the instance so
    # near-zero entries are not judged by the finite-difference noise floor
    gscale = max(np.max(np.abs(g)) for g in g_theta)
    kscale = np.max(np.abs(g_knots))
    assert gscale > 0 and kscale > 0

    rng = np.random.default_rng(3)
    arrays = params.arrays()
    for _ in range(40):
        k = int(rng.integers(len(arrays)))
        idx = np.unravel_index(int(rng.integers(arrays[k].size)),
                               arrays[k].shape)
        h = 1e-6 * max(1.0, abs(arrays[k][idx]))
        orig = arrays[k][idx]
        arrays[k][idx] = orig + h
        lp = value()
        arrays[k][idx] = orig - h
        lm = value()
        arrays[k][idx] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(g_theta[k][idx] - fd) <= 1e-4 * max(abs(fd), gscale)

    for k in range(4):
        for j in range(6):
            h = 1e-6
            orig = spline.knots[k, j]
            spline.knots[k, j] = orig + h
            lp = value()
            spline.knots[k, j] = orig - h
            lm = value()
            spline.knots[k, j] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(g_knots[k, j] - fd) <= 1e-4 * max(abs(fd), kscale)
    assert time.perf_counter() - t0 < 120.0


def test_adjoint_matches_unrolled_gradients():
    t0 = time.perf_counter()
    params, spline, tn, xn, intr, plan = small_instance(n_events=20)
    grads = {}
    for mode in ("adjoint", "direct"):
        cfg = WarpConfig(solver="euler", n_steps=6, backprop=mode)
        _, g_theta, g_knots, _ = total_loss(params, spline, tn, xn, plan,
                                            intr, warp_cfg=cfg)
        grads[mode] = (g_theta, g_knots)
    worst = max(np.max(np.abs(a - u)) for a, u in
                zip(grads["adjoint"][0], grads["direct"][0]))
    assert worst <= 1e-6
    npt.assert_array_equal(grads["adjoint"][1], grads["direct"][1])
    assert time.perf_counter() - t0 < 30.0


# -- closed-loop recovery -----------------------------------------------------


@pytest.fixture(scope="module")
def acceptance_case():
    scene, omega, nu = synth.scene_preset("acceptance")
    motion = synth.preset_motion(scene, omega, nu)
    events, gt = synth.generate(scene, motion)
    seg = segment_stream(events, len(events), scene.intrinsics)[0]
    return scene, omega, nu, events, gt, seg


@pytest.fixture(scope="module")
def full_run(acceptance_case):
    scene, _, _, _, _, seg = acceptance_case
    cfg = ef.preset("mvsec")
    t0 = time.perf_counter()
    params, spline, report = ef.train_segment(seg, cfg, scene.intrinsics)
    wall = time.perf_counter() - t0
    return cfg, params, spline, report, wall


def displacement_epe(params, gt, events, intr, warp_cfg):
    pred = metrics.extract_flow_grid(params, 0.0, intr, interval=1.0,
                                     warp_cfg=warp_cfg)
    gt_disp, gt_mask = gt.displacement_grid(0.0, 1.0)
    gtg = metrics.FlowGrid(gt_disp, gt_mask, "px_per_interval", 1.0)
    emask = metrics.event_activity_mask(events, intr)
    epe, _, _, n_valid = metrics.flow_metrics(pred, gtg, emask)
    assert n_valid > 100
    return epe


def variance_ratio(params, seg, intr, warp_cfg, t_ref=0.5):
    tn, xn = normalize_segment(seg, intr)
    to_px = lambda p: np.stack([p[:, 0] * intr.fx + intr.cx,
                                p[:, 1] * intr.fy + intr.cy], axis=1)
    v_id = -losses.variance_loss(
        losses.rasterize_iwe(to_px(xn), intr.width, intr.height, 1.0))[0]
    warped = warp_to(params, tn, xn, t_ref, warp_cfg)
    v_tr = -losses.variance_loss(
        losses.rasterize_iwe(to_px(warped), intr.width, intr.height, 1.0))[0]
    return v_tr / v_id


def test_joint_recovery_on_acceptance_scene(acceptance_case, full_run):
    scene, _, _, events, gt, _ = acceptance_case
    cfg, params, spline, report, wall = full_run
    assert len(report) == 1000
    assert wall <= 900.0

    epe = displacement_epe(params, gt, events, scene.intrinsics, cfg.warp)
    assert epe <= 0.5

    ts = np.linspace(0.0, 1.0, 33)
    pred_tw = spline.to_physical(ts, t_span=scene.duration)
    gt_tw = gt.twist_physical(ts * scene.duration)
    rms = metrics.motion_rms(pred_tw, gt_tw, align_nu_scale=True)
    assert rms["rms_omega"] <= 3.0
    assert rms["nu_direction_deg"] <= 5.0


def test_iwe_sharpening(acceptance_case, full_run):
    scene, _, _, _, _, seg = acceptance_case
    cfg, params, _, _, _ = full_run
    assert variance_ratio(params, seg, scene.intrinsics, cfg.warp) >= 1.5


def test_early_stopping_saves_iterations(acceptance_case, full_run):
    scene, _, _, events, gt, seg = acceptance_case
    cfg_full, params_full, _, _, _ = full_run
    cfg = dataclasses.replace(
        cfg_full, early_stop=EarlyStop(patience=45, min_delta=1e-3,
                                       warmup=300))
    params, _, report = ef.train_segment(seg, cfg, scene.intrinsics)
    assert report.stop_reason == "early_stop"
    assert len(report) <= 0.7 * 1000

    epe_full = displacement_epe(params_full, gt, events, scene.intrinsics,
                                cfg_full.warp)
    epe_early = displacement_epe(params, gt, events, scene.intrinsics,
                                 cfg.warp)
    assert epe_early <= 1.05 * epe_full


def test_training_is_bit_deterministic(tmp_path, acceptance_case, full_run):
    scene, _, _, _, _, seg = acceptance_case
    cfg, params_a, spline_a, report_a, _ = full_run
    params_b, spline_b, report_b = ef.train_segment(seg, cfg, scene.intrinsics)

    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    report_a.to_csv(pa)
    report_b.to_csv(pb)
    assert pa.read_bytes() == pb.read_bytes()

    ca, cb = tmp_path / "a.emf", tmp_path / "b.emf"
    net.save_checkpoint(ca, params_a)
    net.save_checkpoint(cb, params_b)
    assert ca.read_bytes() == cb.read_bytes()
    assert spline_a.knots.tobytes() == spline_b.knots.tobytes()


def test_pure_rotation_keeps_geometric_loss_at_zero():
    scene, omega, nu = synth.scene_preset("rotation")
    assert np.all(nu == 0.0)
    motion = synth.preset_motion(scene, omega, nu)
    events, gt = synth.generate(scene, motion)
    seg = segment_stream(events, len(events), scene.intrinsics)[0]

    # zero nu-knots sit on the residual's fixed point: the loss is quadratic
    # in nu, so value and gradient both vanish and the knots must not move
    init = np.zeros((4, 6))
    init[:, :3] = omega * scene.duration
    cfg = dataclasses.replace(ef.preset("mvsec"), initial_knots=init,
                              n_iters=200, seed=11)
    _, spline, report = ef.train_segment(seg, cfg, scene.intrinsics)

    assert np.max(np.abs(report.loss_geom)) <= 1e-6
    npt.assert_array_equal(spline.knots, init)

    ts = np.linspace(0.0, 1.0, 33)
    pred_tw = spline.to_physical(ts, t_span=scene.duration)
    gt_tw = gt.twist_physical(ts * scene.duration)
    rms = metrics.motion_rms(pred_tw, gt_tw)
    assert rms["rms_omega"] <= 2.0


def test_geometric_term_improves_flow_on_translation_scene():
    scene, omega, nu = synth.scene_preset("translation")
    motion = synth.preset_motion(scene, omega, nu)
    events, gt = synth.generate(scene, motion)
    seg = segment_stream(events, len(events), scene.intrinsics)[0]
    intr = scene.intrinsics

    results = {}
    for w_geom in (0.25, 0.0):
        cfg = dataclasses.replace(ef.preset("mvsec"), w_geom=w_geom,
                                  n_iters=600, seed=11)
        params, spline, _ = ef.train_segment(seg, cfg, intr)
        epe = displacement_epe(params, gt, events, intr, cfg.warp)
        results[w_geom] = (params, spline, epe, cfg)

    epe_with, epe_without = results[0.25][2], results[0.0][2]
    assert epe_with < epe_without
    assert (epe_without - epe_with) / epe_without >= 0.10

    # the jointly consistent solution also wins under the combined objective:
    # the contrast-only flow slides along the stripes, which the geometric
    # term prices in while the contrast term cannot see it
    tn, xn = normalize_segment(seg, intr)
    plan = SamplingPlan(t_ref=0.5,
                       neigh_idx=temporal_neighbors(tn, 0.5,
                                                    min(15000, len(tn))),
                       geom_idx=np.arange(len(tn)))
    totals = {}
    for w_geom, (params, spline, _, cfg) in results.items():
        breakdown, _, _, _ = total_loss(params, spline, tn, xn, plan, intr,
                                        weights=(1.0, 0.25),
                                        warp_cfg=cfg.warp)
        totals[w_geom] = breakdown.total
    assert totals[0.25] < totals[0.0]
