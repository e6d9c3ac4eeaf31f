"""Synthetic event generator and its analytic ground truth."""

import numpy as np
import numpy.testing as npt
import pytest

from emoflow.spline import MotionSpline
from emoflow.synth import (
    SCENE_PRESETS,
    DegenerateSceneError,
    SceneSpec,
    default_intrinsics,
    generate,
    preset_motion,
    scene_preset,
)


def make_scene(**kw):
    kw.setdefault("intrinsics", default_intrinsics())
    kw.setdefault("n_points", 300)
    kw.setdefault("events_per_point_per_px", 2.0)
    kw.setdefault("seed", 5)
    return SceneSpec(**kw)


@pytest.fixture(scope="module")
def default_run():
    scene = make_scene()
    motion = preset_motion(scene, [0.1, -0.05, 0.6], [0.2, 0.1, 0.05])
    events, gt = generate(scene, motion)
    return scene, events, gt


def test_zero_motion_emits_no_events():
    scene = make_scene(n_points=50)
    events, _ = generate(scene, MotionSpline.constant(np.zeros(3), np.zeros(3),
                                                      t_span=scene.duration))
    assert len(events) == 0


def test_generation_is_deterministic():
    scene = make_scene()
    motion = preset_motion(scene, [0.0, 0.0, 0.5], [0.1, 0.0, 0.0])
    ev1, _ = generate(scene, motion)
    ev2, _ = generate(scene, motion)
    npt.assert_array_equal(ev1.t, ev2.t)
    npt.assert_array_equal(ev1.x, ev2.x)
    npt.assert_array_equal(ev1.y, ev2.y)
    npt.assert_array_equal(ev1.p, ev2.p)
    ev3, _ = generate(make_scene(seed=6), motion)
    assert len(ev3) != len(ev1) or not np.array_equal(ev3.x, ev1.x)


def test_events_sorted_interior_and_in_frame(default_run):
    scene, events, _ = default_run
    assert len(events) > 500
    assert np.all(np.diff(events.t) >= 0)
    assert events.t[0] > 0.0 and events.t[-1] < scene.duration
    intr = scene.intrinsics
    assert np.all((events.x >= 0) & (events.x <= intr.width - 1))
    assert np.all((events.y >= 0) & (events.y <= intr.height - 1))
    assert set(np.unique(events.p)) <= {-1, 1}


def test_events_lie_on_their_point_tracks(default_run):
    _, events, gt = default_run
    npt.assert_array_equal(events.x, gt.tracks_px[gt.event_step, gt.event_point, 0])
    npt.assert_array_equal(events.y, gt.tracks_px[gt.event_step, gt.event_point, 1])


def test_same_point_events_are_threshold_separated(default_run):
    scene, events, gt = default_run
    thresh = 1.0 / scene.events_per_point_per_px
    pts = np.stack([events.x, events.y], axis=1)
    for point in np.unique(gt.event_point)[:40]:
        idx = np.flatnonzero(gt.event_point == point)
        order = idx[np.argsort(gt.event_step[idx])]
        steps = np.linalg.norm(np.diff(pts[order], axis=0), axis=1)
        assert np.all(steps >= thresh - 1e-9)


def test_ground_truth_flow_satisfies_geometric_residual(default_run):
    _, events, gt = default_run
    r = gt.residuals_of_gt_flow(events)
    assert np.max(np.abs(r)) < 1e-9


def test_constant_motion_recovers_physical_twist(default_run):
    scene, _, gt = default_run
    tw = gt.twist_physical(np.array([0.0, 0.03, 0.09]))
    npt.assert_allclose(tw, np.tile([0.1, -0.05, 0.6, 0.2, 0.1, 0.05], (3, 1)),
                        rtol=1e-12)


def test_pure_z_rotation_keeps_radii():
    scene = make_scene(n_points=100)
    motion = preset_motion(scene, [0.0, 0.0, 2.0], [0.0, 0.0, 0.0])
    _, gt = generate(scene, motion)
    c = np.array([scene.intrinsics.cx, scene.intrinsics.cy])
    r0 = np.linalg.norm(gt.tracks_px[0] - c, axis=1)
    r1 = np.linalg.norm(gt.tracks_px[-1] - c, axis=1)
    npt.assert_allclose(r1, r0, atol=1e-6)
    # and the points actually moved
    assert np.median(np.linalg.norm(gt.tracks_px[-1] - gt.tracks_px[0], axis=1)) > 1.0


def test_forward_translation_flow_is_radial_with_null_foe():
    scene = make_scene(n_points=60)
    motion = preset_motion(scene, [0.0, 0.0, 0.0], [0.0, 0.0, 0.4])
    _, gt = generate(scene, motion)
    intr = scene.intrinsics
    foe, valid = gt.flow_px_per_s(0.05, np.array([[intr.cx, intr.cy]]))
    assert valid.all()
    npt.assert_allclose(foe, 0.0, atol=1e-12)
    px = np.array([[10.0, 20.0], [50.0, 40.0], [32.0, 5.0]])
    u, _ = gt.flow_px_per_s(0.05, px)
    rad = px - np.array([intr.cx, intr.cy])
    cross = u[:, 0] * rad[:, 1] - u[:, 1] * rad[:, 0]
    npt.assert_allclose(cross, 0.0, atol=1e-9)
    # expansion: flow points away from the focus
    assert np.all(np.sum(u * rad, axis=1) > 0)


def test_flow_matches_track_velocity(default_run):
    scene, _, gt = default_run
    j = 400   # an interior integration step
    dt = (gt.tau[j + 1] - gt.tau[j - 1]) * scene.duration
    sel = gt.in_frame[j - 1] & gt.in_frame[j] & gt.in_frame[j + 1]
    fd = (gt.tracks_px[j + 1, sel] - gt.tracks_px[j - 1, sel]) / dt
    u, valid = gt.flow_px_per_s(gt.tau[j] * scene.duration, gt.tracks_px[j, sel])
    npt.assert_allclose(u[valid], fd[valid], rtol=1e-4, atol=1e-3)


def test_displacement_grid_zero_interval_and_short_interval(default_run):
    scene, _, gt = default_run
    disp, valid = gt.displacement_grid(0.3, 0.3, n_steps=1)
    npt.assert_array_equal(disp, 0.0)
    assert valid.all()
    dtau = 0.01
    disp, valid = gt.displacement_grid(0.0, dtau, n_steps=4)
    flow, fvalid = gt.flow_grid(0.0)
    m = valid & fvalid
    npt.assert_allclose(disp[m], flow[m] * dtau * scene.duration,
                        rtol=2e-3, atol=2e-4)


def test_depth_of_fronto_parallel_plane(default_run):
    scene, _, gt = default_run
    # at tau=0 the plane is at z0 regardless of pixel
    z = gt.depth_at(0.0, np.array([[0.0, 0.0], [0.2, -0.1]]))
    npt.assert_allclose(z, scene.z0, rtol=1e-12)


def test_timestamp_jitter_keeps_count_and_order():
    scene = make_scene(jitter_t=1e-4)
    base = make_scene()
    motion = preset_motion(scene, [0.0, 0.0, 0.8], [0.15, 0.0, 0.0])
    ev_j, _ = generate(scene, motion)
    ev_b, _ = generate(base, motion)
    assert len(ev_j) == len(ev_b)
    assert np.all(np.diff(ev_j.t) >= 0)
    assert ev_j.t[0] > 0 and ev_j.t[-1] < scene.duration
    assert not np.array_equal(ev_j.t, ev_b.t)


def test_blobs_cluster_tighter_than_random():
    def median_nn(scene):
        # seeding is deterministic per scene; reuse the generator path
        from emoflow.synth import _seed_pixels
        rng = np.random.Generator(np.random.Philox(scene.seed))
        pts = _seed_pixels(scene, rng)
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        return np.median(d.min(axis=1))

    rand = median_nn(make_scene(texture="random", n_points=400))
    blob = median_nn(make_scene(texture="blobs", n_points=400, n_blobs=40))
    assert blob < 0.5 * rand


def test_stripes_concentrate_on_lines():
    scene = make_scene(texture="stripes", n_points=400, n_stripes=6,
                       stripe_angle=0.3)
    from emoflow.synth import _seed_pixels
    rng = np.random.Generator(np.random.Philox(scene.seed))
    pts = _seed_pixels(scene, rng)
    mdir = np.array([-np.sin(0.3), np.cos(0.3)])
    proj = (pts - pts.mean(axis=0)) @ mdir
    assert len(np.unique(np.round(proj, 6))) <= 6


def test_degenerate_motion_rejected():
    scene = make_scene(n_points=80)
    with pytest.raises(DegenerateSceneError):
        generate(scene, preset_motion(scene, [0.0, 0.0, 0.0], [60.0, 0.0, 0.0]))


def test_scene_validation():
    with pytest.raises(ValueError):
        make_scene(z0=-1.0)
    with pytest.raises(ValueError):
        make_scene(texture="checker")
    with pytest.raises(ValueError):
        make_scene(events_per_point_per_px=0.0)
    with pytest.raises(ValueError):
        make_scene(duration=0.0)
    with pytest.raises(ValueError):
        make_scene(tilt=[0.0, 1.0, -0.2])


def test_scene_presets_generate():
    for name in SCENE_PRESETS:
        scene, omega, nu = scene_preset(name)
        events, gt = generate(scene, preset_motion(scene, omega, nu))
        assert len(events) > 300
        r = gt.residuals_of_gt_flow(events)
        assert np.max(np.abs(r)) < 1e-9
    with pytest.raises(ValueError):
        scene_preset("imaginary")
