"""Command-line front end: synth, train, eval, viz, selftest.

Every command is deterministic given --seed.  Exit codes: 0 success, 1 failed
self-test, 2 usage errors (argparse default), 3 training divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import geometry, losses, metrics, net as net_mod, spline as spline_mod, synth
from .events import (CameraIntrinsics, read_events, segment_stream,
                     write_events_binary, write_events_csv, normalize_segment)
from .trainer import (PRESETS, TrainConfig, TrainingDiverged, apply_config,
                      export_sequence_trajectory, parse_config_text, preset,
                      run_sequence)
from .warp import WarpConfig, point_tracks, warp_to, write_tracks_csv
from . import viz as viz_mod

EXIT_SELFTEST_FAIL = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3


def _limit_threads() -> None:
    """Honor EMOFLOW_THREADS as a cap on BLAS worker threads (best effort)."""
    cap = os.environ.get("EMOFLOW_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        print(f"warning: ignoring non-integer EMOFLOW_THREADS={cap!r}", file=sys.stderr)
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(n))


def _parse_vec3(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
    return np.array([float(p) for p in parts])


def _load_intrinsics(args) -> CameraIntrinsics:
    if args.intrinsics:
        return CameraIntrinsics.load(args.intrinsics)
    raise SystemExit("error: --intrinsics is required")


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.preset:
        scene, omega, nu = synth.scene_preset(args.preset, seed=args.seed)
    else:
        intr = synth.default_intrinsics() if not args.intrinsics \
            else CameraIntrinsics.load(args.intrinsics)
        scene = synth.SceneSpec(
            intrinsics=intr, z0=args.z0, n_points=args.n_points,
            events_per_point_per_px=args.density, duration=args.duration,
            seed=args.seed, texture=args.texture, stripe_angle=args.stripe_angle,
            n_stripes=args.n_stripes,
            tilt=_parse_vec3(args.tilt) if args.tilt else None)
        omega, nu = args.omega, args.nu
    motion = synth.preset_motion(scene, omega, nu)
    events, gt = synth.generate(scene, motion)

    out = args.out
    if out.endswith(".csv"):
        write_events_csv(out, events)
    else:
        write_events_binary(out, events, scene.intrinsics.width, scene.intrinsics.height)
    base = out.rsplit(".", 1)[0]
    scene.intrinsics.save(base + ".intr")
    grid, mask = gt.flow_grid(args.gt_time * scene.duration)
    metrics.save_flow_grid(base + "_gtflow.flw",
                           metrics.FlowGrid(grid, mask, "px_per_s"))
    ts = np.linspace(0.0, 1.0, 33)
    tw = gt.twist_physical(ts * scene.duration)
    with open(base + "_gttwist.csv", "w") as f:
        f.write("t,wx,wy,wz,vx,vy,vz\n")
        for tn_, row in zip(ts, tw):
            cols = ",".join(format(x, ".17g") for x in row)
            f.write(f"{format(tn_ * scene.duration, '.17g')},{cols}\n")
    print(f"wrote {len(events)} events over {scene.duration} s to {out}")
    print(f"sidecars: {base}.intr {base}_gtflow.flw {base}_gttwist.csv")
    return 0


# -- train --------------------------------------------------------------------

def _build_train_config(args) -> TrainConfig:
    cfg = preset(args.preset) if args.preset else TrainConfig()
    options = {}
    if args.config:
        with open(args.config) as f:
            options.update(parse_config_text(f.read()))
    # explicit flags win over the config file
    flag_map = {
        "n_iters": args.n_iters, "seed": args.seed, "sigma": args.sigma,
        "w_flow": args.w_flow, "w_geom": args.w_geom,
        "neigh_size": args.neigh_size, "geom_sample_size": args.geom_sample_size,
        "hidden_width": args.hidden_width, "knot_init": args.knot_init,
        "events_per_segment": args.events_per_segment, "solver": args.solver,
        "n_steps": args.n_steps, "backprop": args.backprop,
    }
    for key, val in flag_map.items():
        if val is not None:
            options[key] = str(val)
    if args.early_stop:
        options["early_stop"] = "true"
    return apply_config(cfg, options)


def cmd_train(args) -> int:
    cfg = _build_train_config(args)
    intr = _load_intrinsics(args)
    events = read_events(args.events)
    segments = segment_stream(events, cfg.events_per_segment, intrinsics=intr)
    if not segments:
        print(f"error: stream has {len(events)} events, fewer than one "
              f"segment of {cfg.events_per_segment}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out_dir, exist_ok=True)
    t0 = time.perf_counter()
    results = run_sequence(segments, cfg, intr)
    diverged = False
    for res in results:
        tag = f"seg{res.index:03d}"
        if res.error is not None:
            diverged = True
            print(f"{tag}: FAILED: {res.error}")
            if res.report is not None and len(res.report):
                res.report.to_csv(os.path.join(args.out_dir, f"{tag}_report.csv"))
            continue
        net_mod.save_checkpoint(os.path.join(args.out_dir, f"{tag}.emf"), res.params)
        res.report.to_csv(os.path.join(args.out_dir, f"{tag}_report.csv"))
        spline_mod.write_trajectory_csv(
            os.path.join(args.out_dir, f"{tag}_twist.csv"), res.spline,
            t_offset=segments[res.index].t_start)
        print(f"{tag}: {len(res.report)} iters, final loss "
              f"{res.report.loss_total[-1]:.6g}, stop={res.report.stop_reason}, "
              f"{res.report.wall_time_s:.1f}s")
    export_sequence_trajectory(os.path.join(args.out_dir, "trajectory.csv"),
                               results, segments)
    print(f"total wall time {time.perf_counter() - t0:.1f}s; outputs in {args.out_dir}")
    return EXIT_DIVERGENCE if diverged else 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    params = net_mod.load_checkpoint(args.checkpoint)
    intr = _load_intrinsics(args)
    gt = metrics.load_flow_grid(args.gt)
    interval = args.dt
    if gt.mode == "px_per_interval" and interval is None:
        interval = gt.interval
    pred = metrics.extract_flow_grid(params, args.t, intr, interval=interval,
                                     t_span=args.t_span)
    mask = None
    if args.events:
        mask = metrics.event_activity_mask(read_events(args.events), intr)
    epe, ae, out_pct, n_valid = metrics.flow_metrics(pred, gt, mask)
    rms_o = rms_n = float("nan")
    if args.traj and args.gt_traj:
        pt = np.genfromtxt(args.traj, delimiter=",", names=True)
        gtt = np.genfromtxt(args.gt_traj, delimiter=",", names=True)
        cols = ["wx", "wy", "wz", "vx", "vy", "vz"]
        p6 = np.stack([pt[c] for c in cols], axis=1)
        g6 = np.stack([gtt[c] for c in cols], axis=1)
        if len(p6) != len(g6):
            print("error: trajectory sample counts differ", file=sys.stderr)
            return EXIT_USAGE
        rms = metrics.motion_rms(p6, g6, align_nu_scale=True)
        rms_o, rms_n = rms["rms_omega"], rms["rms_nu"]
        print(f"nu_aligned_rms={rms['rms_nu_aligned']:.6g} "
              f"nu_scale={rms['nu_scale']:.6g} "
              f"nu_direction_deg={rms['nu_direction_deg']:.6g}")
    report = metrics.MetricsReport(epe=epe, ae=ae, out_pct=out_pct,
                                   rms_omega=rms_o, rms_nu=rms_n, n_valid=n_valid)
    print(report.summary())
    if args.out:
        with open(args.out, "w") as f:
            f.write(report.summary() + "\n")
    return 0


# -- viz ----------------------------------------------------------------------

def cmd_viz(args) -> int:
    wrote = []
    if args.legend:
        viz_mod.write_ppm(args.legend, viz_mod.color_wheel_legend(args.legend_size))
        wrote.append(args.legend)
    params = None
    intr = None
    if args.checkpoint:
        params = net_mod.load_checkpoint(args.checkpoint)
        intr = _load_intrinsics(args)
    if args.flow:
        if params is None:
            print("error: --flow needs --checkpoint/--intrinsics", file=sys.stderr)
            return EXIT_USAGE
        grid = metrics.extract_flow_grid(params, args.t, intr, t_span=args.t_span)
        mask = None
        if args.events_only:
            if not args.events:
                print("error: --events-only needs --events", file=sys.stderr)
                return EXIT_USAGE
            mask = metrics.event_activity_mask(read_events(args.events), intr)
        viz_mod.write_ppm(args.flow, viz_mod.flow_to_rgb(grid.values, mask))
        wrote.append(args.flow)
    if args.iwe:
        if params is None or not args.events:
            print("error: --iwe needs --checkpoint/--intrinsics/--events", file=sys.stderr)
            return EXIT_USAGE
        events = read_events(args.events)
        segs = segment_stream(events, len(events), intrinsics=intr)
        tn, xn = normalize_segment(segs[0], intr)
        cfg = WarpConfig(solver=args.solver or "euler", n_steps=args.n_steps or 8)
        x_ref = warp_to(params, tn, xn, args.t, cfg)
        px = np.stack([x_ref[:, 0] * intr.fx + intr.cx,
                       x_ref[:, 1] * intr.fy + intr.cy], axis=1)
        iwe = losses.rasterize_iwe(px, intr.width, intr.height, args.sigma)
        viz_mod.write_pgm16(args.iwe, iwe.image)
        wrote.append(args.iwe)
    if args.tracks:
        if params is None or not args.events:
            print("error: --tracks needs --checkpoint/--intrinsics/--events", file=sys.stderr)
            return EXIT_USAGE
        events = read_events(args.events)
        segs = segment_stream(events, len(events), intrinsics=intr)
        tn, xn = normalize_segment(segs[0], intr)
        step = max(1, len(tn) // args.n_tracks)
        sel = np.arange(0, len(tn), step)
        cfg = WarpConfig(solver=args.solver or "euler", n_steps=args.n_steps or 8)
        rows = point_tracks(params, tn[sel], xn[sel], args.t, cfg)
        write_tracks_csv(args.tracks, rows)
        wrote.append(args.tracks)
    if not wrote:
        print("error: nothing to do; pass --flow/--iwe/--tracks/--legend", file=sys.stderr)
        return EXIT_USAGE
    print("wrote " + " ".join(wrote))
    return 0


# -- selftest -----------------------------------------------------------------

def _suite_geometry(inject: str | None) -> tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(123))
    nu = rng.normal(size=(100000, 3))
    xy = rng.uniform(-1.0, 1.0, size=(100000, 2))
    xh = geometry.homogeneous(xy)
    a_nu = np.einsum("nij,nj->ni", geometry.a_matrix(xy), nu)
    lhs = np.abs(np.sum(a_nu * np.cross(nu, xh), axis=1))
    worst = int(np.argmax(lhs))
    if lhs[worst] > 1e-12:
        return False, (f"depth-elimination violated: |value|={lhs[worst]:.3e} at "
                       f"nu={nu[worst]}, x={xy[worst]}")
    for i in range(200):
        omega = rng.normal(size=3)
        nu1 = rng.normal(size=3)
        s = geometry.s_matrix(omega, nu1)
        sign = -1.0 if inject == "s_sign_flip" else 1.0
        so, sn = geometry.skew(omega), geometry.skew(nu1)
        ref = sign * 0.5 * (sn @ so + so @ sn)
        if not np.allclose(s, ref, atol=1e-13):
            return False, f"s-matrix mismatch at omega={omega}, nu={nu1}"
        xy1 = rng.uniform(-0.5, 0.5, size=2)
        z = rng.uniform(0.5, 5.0)
        u = geometry.motion_field(xy1, z, omega, nu1)
        r = geometry.geometric_residual(u, xy1, omega, nu1)
        if abs(float(r)) > 1e-10:
            return False, (f"motion-field flow has residual {float(r):.3e} at "
                           f"omega={omega}, nu={nu1}, x={xy1}, z={z:.3f}")
    return True, "depth elimination, s-matrix, motion-field consistency"


def _suite_gradients(inject: str | None) -> tuple[bool, str]:
    params = net_mod.init_params(5, hidden_width=16)
    rng = np.random.Generator(np.random.Philox(5))
    q = rng.uniform(-0.5, 0.5, size=(8, 3))
    upstream = rng.normal(size=(8, 2))
    u, cache = net_mod.forward(params, q, with_cache=True)
    grads, _ = net_mod.backward(params, cache, upstream)
    flat = params.arrays()
    eps = 1e-6
    for trial in range(40):
        li = int(rng.integers(len(flat)))
        arr = flat[li]
        pos = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[pos]
        arr[pos] = old + eps
        up = float(np.sum(net_mod.forward(params, q) * upstream))
        arr[pos] = old - eps
        dn = float(np.sum(net_mod.forward(params, q) * upstream))
        arr[pos] = old
        fd = (up - dn) / (2 * eps)
        an = grads[li][pos]
        if abs(an - fd) > 1e-5 * max(1.0, abs(fd)):
            return False, (f"net gradient mismatch at layer-array {li} {pos}: "
                           f"analytic {an:.8g} vs fd {fd:.8g}")
    return True, "network parameter gradients vs finite differences"


def _suite_adjoint(inject: str | None) -> tuple[bool, str]:
    from .warp import warp_backward_adjoint, warp_backward_direct
    params = net_mod.init_params(11, hidden_width=16)
    rng = np.random.Generator(np.random.Philox(11))
    tn = rng.uniform(0.0, 1.0, size=20)
    xn = rng.uniform(-0.3, 0.3, size=(20, 2))
    upstream = rng.normal(size=(20, 2))
    cfg = WarpConfig(solver="euler", n_steps=8)
    _, tape = warp_to(params, tn, xn, 0.5, cfg, with_tape=True)
    gd = warp_backward_direct(params, tape, upstream)
    ga = warp_backward_adjoint(params, tape, upstream)
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(gd, ga))
    if worst > 1e-6:
        return False, f"adjoint/direct gradient gap {worst:.3e} exceeds 1e-6"
    return True, f"adjoint equals direct backprop (max gap {worst:.2e})"


def _suite_spline(inject: str | None) -> tuple[bool, str]:
    ts = np.linspace(0.0, 1.0, 1001)
    b = spline_mod.basis(ts)
    gap = float(np.max(np.abs(b.sum(axis=1) - 1.0)))
    if gap > 1e-14:
        return False, f"partition-of-unity gap {gap:.3e} at t={ts[np.argmax(np.abs(b.sum(axis=1) - 1.0))]}"
    if np.any(b < 0):
        return False, "negative basis value on [0, 1]"
    sp = spline_mod.MotionSpline.constant(np.array([0.2, 0.2, 0.2]),
                                          np.array([0.2, 0.2, 0.2]))
    vel = sp.velocity(ts)
    if not np.all(vel == 0.2):
        return False, "constant knots do not give exactly constant velocity"
    return True, "partition of unity, non-negativity, constant-knot exactness"


SELFTEST_SUITES = {
    "geometry": _suite_geometry,
    "gradients": _suite_gradients,
    "adjoint": _suite_adjoint,
    "spline": _suite_spline,
}


def cmd_selftest(args) -> int:
    names = list(SELFTEST_SUITES) if args.suite == "all" else [args.suite]
    failed = False
    for name in names:
        start = time.perf_counter()
        ok, detail = SELFTEST_SUITES[name](args.inject)
        dt = time.perf_counter() - start
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name:10s} ({dt:.2f}s) {detail}")
        if not ok:
            failed = True
    return EXIT_SELFTEST_FAIL if failed else 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="emoflow",
        description="Unsupervised event-based optical flow and egomotion estimation")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic event stream + ground truth")
    sp.add_argument("--out", required=True, help="output events file (.evt or .csv)")
    sp.add_argument("--preset", choices=synth.SCENE_PRESETS, default=None)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--z0", type=float, default=2.0, help="plane depth on axis (m)")
    sp.add_argument("--tilt", default=None, help="plane normal as nx,ny,nz")
    sp.add_argument("--n-points", type=int, default=2000)
    sp.add_argument("--density", type=float, default=1.0,
                    help="events per point per pixel of travel")
    sp.add_argument("--duration", type=float, default=0.1, help="seconds")
    sp.add_argument("--texture", choices=synth.TEXTURES, default="random")
    sp.add_argument("--stripe-angle", type=float, default=0.5)
    sp.add_argument("--n-stripes", type=int, default=8)
    sp.add_argument("--omega", type=_parse_vec3, default=np.zeros(3), help="rad/s")
    sp.add_argument("--nu", type=_parse_vec3, default=np.zeros(3), help="m/s")
    sp.add_argument("--intrinsics", default=None)
    sp.add_argument("--gt-time", type=float, default=0.5,
                    help="normalized time of the ground-truth flow grid")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train flow + motion on an event stream")
    tp.add_argument("events")
    tp.add_argument("--intrinsics", required=True)
    tp.add_argument("--out-dir", default="train_out")
    tp.add_argument("--preset", choices=PRESETS, default=None)
    tp.add_argument("--config", default=None, help="key=value file; flags override")
    tp.add_argument("--n-iters", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--sigma", type=float, default=None)
    tp.add_argument("--w-flow", type=float, default=None)
    tp.add_argument("--w-geom", type=float, default=None)
    tp.add_argument("--neigh-size", type=int, default=None)
    tp.add_argument("--geom-sample-size", type=int, default=None)
    tp.add_argument("--hidden-width", type=int, default=None)
    tp.add_argument("--knot-init", type=float, default=None)
    tp.add_argument("--events-per-segment", type=int, default=None)
    tp.add_argument("--solver", choices=("euler", "rk4"), default=None)
    tp.add_argument("--n-steps", type=int, default=None)
    tp.add_argument("--backprop", choices=("direct", "adjoint"), default=None)
    tp.add_argument("--early-stop", action="store_true")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="score a checkpoint against ground truth")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--intrinsics", required=True)
    ep.add_argument("--gt", required=True, help="ground-truth flow grid (.flw)")
    ep.add_argument("--events", default=None, help="events for the activity mask")
    ep.add_argument("--t", type=float, default=0.5, help="normalized query time")
    ep.add_argument("--dt", type=float, default=None,
                    help="displacement interval (normalized); default instantaneous")
    ep.add_argument("--t-span", type=float, default=1.0,
                    help="segment duration in seconds (px/s conversion)")
    ep.add_argument("--traj", default=None, help="predicted twist CSV")
    ep.add_argument("--gt-traj", default=None, help="ground-truth twist CSV")
    ep.add_argument("--out", default=None)
    ep.set_defaults(func=cmd_eval)

    vp = sub.add_parser("viz", help="render flow/IWE images and point tracks")
    vp.add_argument("--checkpoint", default=None)
    vp.add_argument("--intrinsics", default=None)
    vp.add_argument("--events", default=None)
    vp.add_argument("--t", type=float, default=0.5)
    vp.add_argument("--t-span", type=float, default=1.0)
    vp.add_argument("--sigma", type=float, default=1.0)
    vp.add_argument("--solver", choices=("euler", "rk4"), default=None)
    vp.add_argument("--n-steps", type=int, default=None)
    vp.add_argument("--flow", default=None, help="write flow color image (PPM)")
    vp.add_argument("--events-only", action="store_true",
                    help="mask the flow image to event-active pixels")
    vp.add_argument("--iwe", default=None, help="write warped-event image (PGM)")
    vp.add_argument("--tracks", default=None, help="write point-track CSV")
    vp.add_argument("--n-tracks", type=int, default=64)
    vp.add_argument("--legend", default=None, help="write the color-wheel legend (PPM)")
    vp.add_argument("--legend-size", type=int, default=128)
    vp.set_defaults(func=cmd_viz)

    cp = sub.add_parser("selftest", help="run built-in invariant suites")
    cp.add_argument("--suite", choices=["all"] + list(SELFTEST_SUITES), default="all")
    cp.add_argument("--inject", choices=["s_sign_flip"], default=None,
                    help="fault injection hook used to verify the checker itself")
    cp.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    _limit_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
