"""Command-line entry point: ``monosf <subcommand> ...``.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import kitti_io as kio
from .config import ConfigError, RunConfig
from .evaluation import MetricError, Trajectory, evaluate_depth, evaluate_odometry, evaluate_sceneflow
from .losses import MotionEstimate, loss_total
from .refine import BlockParams, RefineError, refine, upsample_params
from .synthetic import SceneError, SceneSpec, render
from .visualize import depth_to_color, error_to_color, flow_to_color, mask_to_color

logger = logging.getLogger("monosf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "EMRMSF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scene(args, cfg):
    spec = SceneSpec() if args.spec is None else SceneSpec.from_json(args.spec)
    gt = render(spec)
    out = Path(args.outdir)
    kio.write_frame_dir(out, spec.full_camera, spec.window, gt.I1_full, gt.I2_full, gt.D1_full, gt.D2_full, gt.right_full)
    g = out / "gt"
    g.mkdir(parents=True, exist_ok=True)
    frame = gt.frame()
    kio.write_sceneflow_dir(g, frame.camera, gt.D1, gt.estimate(frame).scene_flow)
    kio.write_mask_png(g / "noc.png", gt.m_noc)
    kio.write_mask_png(g / "rigidity.png", gt.rigidity)
    kio.write_estimate_dir(g / "estimate", gt.field, gt.rigidity.astype(float))
    ego = spec.ego_motion()
    kio.write_poses(g / "ego_poses.txt", np.stack([np.eye(4), ego.inverse().matrix()]))
    spec.to_json(out / "scene.json")
    logger.info("wrote scene to %s", out)
    return EXIT_OK


def _load_masks(args, shape):
    masks = []
    for name in ("noc", "outlier"):
        path = getattr(args, name, None)
        if path is None:
            masks.append(None)
            continue
        m = kio.read_mask_png(path)
        if m.shape != shape:
            raise ValueError(f"{path}: mask is {m.shape}, frame is {shape}")
        masks.append(m.astype(float))
    return tuple(masks)


def cmd_compute_loss(args, cfg):
    frame = kio.read_frame_dir(args.frame, stereo=not args.no_stereo, full_image=not args.crop_only)
    estimates = []
    for d in args.estimate:
        field, mask = kio.read_estimate_dir(d)
        if field.shape != frame.shape:
            raise ValueError(f"{d}: estimate is {field.shape}, frame is {frame.shape}")
        estimates.append(MotionEstimate.from_frame(frame, field, mask))
    b = loss_total(frame, estimates, cfg.weights, _load_masks(args, frame.shape), full_image=not args.crop_only)
    if not np.isfinite(b.total):
        raise FloatingPointError("loss is not finite")
    _emit(_jsonable(b.to_dict()), args.out)
    return EXIT_OK


def cmd_refine(args, cfg):
    frame = kio.read_frame_dir(args.frame, stereo=not args.no_stereo, full_image=cfg.optimizer.full_image)
    H, W = frame.shape
    if args.init is not None:
        field, mask = kio.read_estimate_dir(args.init)
        init = BlockParams.from_field(field, mask, args.block_size)
    else:
        init = BlockParams.identity(H, W, args.block_size)
    res = refine(frame, init, _load_masks(args, frame.shape), cfg.weights, cfg.optimizer)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    field, mask = upsample_params(res.params, H, W)
    kio.write_estimate_dir(out, field, mask)
    est = res.estimate
    kio.write_sceneflow_dir(out, est.camera, est.depth, est.scene_flow)
    res.write_csv(out / "loss.csv")
    summary = {
        "status": res.status,
        "accepted_steps": res.accepted_steps,
        "total": res.history[-1]["total"],
        "depth_log_scale": res.params.depth_log_scale,
        "block_size": res.params.block_size,
        "ego_twist": [float(v) for v in est.ego_twist],
    }
    _emit(summary, out / "result.json")
    print(f"{res.status}: {res.accepted_steps} accepted steps, total {summary['total']:.6g}")
    return EXIT_OK if res.status != "line_search_failed" else EXIT_NUMERIC


def cmd_evaluate(args, cfg):
    ev = cfg.evaluation
    thresholds = {"abs_thresh": ev.abs_thresh, "rel_thresh": ev.rel_thresh}
    if args.task == "sceneflow":
        pd1, pv1, pd2, pv2, pf, _ = kio.read_sceneflow_dir(args.pred)
        gd1, gv1, gd2, gv2, gf, gfv = kio.read_sceneflow_dir(args.gt)
        for a, b, name in ((pd1, gd1, "disp_1"), (pd2, gd2, "disp_2"), (pf, gf, "flow")):
            if a.shape != b.shape:
                raise ValueError(f"{name}: prediction {a.shape} vs ground truth {b.shape}")
        valid = gv1 & gv2 & gfv
        occ = None
        noc = Path(args.gt) / "noc.png"
        if noc.is_file():
            occ = ~kio.read_mask_png(noc)
        rep = evaluate_sceneflow(pd1, pd2, pf, gd1, gd2, gf, valid, occ, **thresholds)
    elif args.task == "depth":
        pred, gt = kio.read_pfm(args.pred), kio.read_pfm(args.gt)
        rep = evaluate_depth(pred, gt, None, min_depth=ev.min_depth, cap=ev.max_depth, median_scaling=ev.median_scaling)
    else:
        pred = Trajectory(kio.read_poses(args.pred))
        gt = Trajectory(kio.read_poses(args.gt))
        rep = evaluate_odometry(pred, gt, ev.lengths, align=ev.align and not args.no_align, with_scale=ev.with_scale)
    _emit(rep.to_dict(), args.out)
    print(rep.to_table(), file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK


def _read_any_grid(path):
    """Flow PNG, disparity/mask PNG or PFM, dispatched on the file header."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return "pfm", kio.read_pfm(path), None
    _, _, depth, color = kio._png_header(path)
    if depth == 16 and color == 2:
        flow, valid = kio.read_flow_png(path)
        return "flow", flow, valid
    if depth == 16 and color == 0:
        disp, valid = kio.read_disparity_png(path)
        return "disparity", disp, valid
    if depth == 8 and color == 0:
        return "mask", kio.read_mask_png(path).astype(float), None
    raise kio.ParseError(path, 24, f"unsupported PNG layout (bit depth {depth}, color type {color})")


def cmd_visualize(args, cfg):
    kind, data, valid = _read_any_grid(args.input)
    if args.kind == "flow":
        if kind != "flow":
            raise ValueError(f"{args.input} is not a flow file")
        img = flow_to_color(data, valid, args.max_flow)
    elif args.kind == "depth":
        if kind == "disparity":
            img = depth_to_color(np.where(valid, 1.0 / np.where(valid, data, 1.0), 0.0), valid)
        elif kind == "pfm" and data.ndim == 2:
            img = depth_to_color(data)
        else:
            raise ValueError(f"{args.input} is not a depth or disparity file")
    elif args.kind == "mask":
        if data.ndim != 2:
            raise ValueError(f"{args.input} is not a single-channel grid")
        img = mask_to_color(data)
    else:
        if args.gt is None:
            raise UsageError("--gt is required for --kind error")
        gkind, gt, gvalid = _read_any_grid(args.gt)
        if gkind != kind or kind not in ("flow", "disparity"):
            raise ValueError("error maps need matching flow or disparity files")
        img = error_to_color(data, gt, gvalid)
    kio.write_color_png(args.out, img)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="monosf", description="Scene-flow geometry and loss toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="render a synthetic scene to files")
    g.add_argument("spec", nargs="?", help="scene spec JSON (default scene when omitted)")
    g.add_argument("outdir", help="output directory")
    g.set_defaults(func=cmd_gen_scene)

    def frame_flags(q):
        q.add_argument("frame", help="frame directory (calib.txt, crop.txt, images, depths)")
        q.add_argument("--noc", help="non-occlusion mask PNG (ones when omitted)")
        q.add_argument("--outlier", help="fixed outlier mask PNG (recomputed per iterate when omitted)")
        q.add_argument("--no-stereo", action="store_true", help="ignore right_1.png and drop the spatial term")

    c = sub.add_parser("compute-loss", help="evaluate the total loss for given estimates")
    frame_flags(c)
    c.add_argument("--estimate", action="append", required=True,
                   help="estimate directory (twist_v.pfm, twist_w.pfm, rigidity.pfm); repeat for iterations in order")
    c.add_argument("--crop-only", action="store_true", help="warp from the crop instead of the full image")
    c.add_argument("--out", help="write the JSON breakdown here instead of stdout")
    c.set_defaults(func=cmd_compute_loss)

    r = sub.add_parser("refine", help="minimise the loss over a block motion field")
    frame_flags(r)
    r.add_argument("--outdir", required=True, help="where estimate files, loss.csv and result.json go")
    r.add_argument("--init", help="estimate directory to start from (identity when omitted)")
    r.add_argument("--block-size", type=int, default=8, help="block size in pixels (default 8)")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("evaluate", help="benchmark metrics for predictions")
    e.add_argument("task", choices=("sceneflow", "depth", "odometry"))
    e.add_argument("--pred", required=True, help="prediction directory (sceneflow), PFM (depth) or pose file (odometry)")
    e.add_argument("--gt", required=True, help="ground truth in the same form as --pred")
    e.add_argument("--no-align", action="store_true", help="odometry: skip the similarity alignment")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("visualize", help="render a grid as a colour PNG")
    v.add_argument("input", help="flow/disparity/mask PNG or PFM")
    v.add_argument("--kind", required=True, choices=("flow", "depth", "mask", "error"))
    v.add_argument("--out", required=True, help="output PNG path")
    v.add_argument("--gt", help="ground truth for --kind error")
    v.add_argument("--max-flow", type=float, help="flow magnitude mapped to full saturation")
    v.set_defaults(func=cmd_visualize)
    return p


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        with _thread_limit():
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"monosf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RefineError, FloatingPointError) as exc:
        print(f"monosf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, kio.ParseError, MetricError, SceneError, OSError, ValueError) as exc:
        print(f"monosf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
