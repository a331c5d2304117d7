"""Command-line pipeline: synthesize scenes, optimize, post-process, evaluate.

Exit codes: 0 success, 1 validation or compute failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, evalkit
from .dataio import VIEWS
from .losses import LossWeights
from .optim import (OptimizationError, OptimizeConfig, depth_to_disparity,
                    optimize_scene, run_gradcheck)

TRACE_COLUMNS = "iter,scale,lr,image,smooth,consistency,explainability,total"

GRADCHECK_TOLERANCE = 1e-4

# Largest value the 16-bit x256 depth format can hold; deeper estimates are
# clamped for storage only.
_STORE_MAX = 65535.0 / 256.0


def _parse_weights(text: str) -> LossWeights:
    mapping = {"image": "w_image", "ds": "w_ds", "lr": "w_lr", "exp": "w_exp"}
    kwargs = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in mapping:
            raise argparse.ArgumentTypeError(
                f"bad weight '{item}': expected one of {','.join(mapping)}=value")
        try:
            kwargs[mapping[key.strip()]] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-numeric weight value in '{item}'")
    return LossWeights(**kwargs)


def _add_optim_flags(p: argparse.ArgumentParser):
    p.add_argument("--iterations", type=int, default=300, help="Adam steps per scale")
    p.add_argument("--scales", type=int, default=4, help="pyramid levels")
    p.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    p.add_argument("--alpha", type=float, default=0.85, help="SSIM share of the image loss")
    p.add_argument("--c1", type=float, default=0.01)
    p.add_argument("--c2", type=float, default=0.03)
    p.add_argument("--weights", type=_parse_weights, default=LossWeights(),
                   metavar="K=V[,K=V...]", help="term weights (image, ds, lr, exp)")
    p.add_argument("--dmax", type=float, default=0.3,
                   help="upper bound of normalized disparity")
    p.add_argument("--freeze-stereo-pose", dest="freeze_stereo_pose",
                   action="store_true", default=True,
                   help="keep the stereo pose at the calibrated baseline (default)")
    p.add_argument("--free-stereo-pose", dest="freeze_stereo_pose",
                   action="store_false",
                   help="jointly optimize the stereo pose (metric scale floats)")


def _config_from_args(args) -> OptimizeConfig:
    w = args.weights
    weights = LossWeights(w.w_image, w.w_ds, w.w_lr, w.w_exp,
                          alpha=args.alpha, c1=args.c1, c2=args.c2)
    return OptimizeConfig(iterations=args.iterations, scales=args.scales, lr=args.lr,
                          weights=weights, d_max=args.dmax, seed=args.seed,
                          deterministic=args.deterministic,
                          freeze_stereo_pose=args.freeze_stereo_pose)


def cmd_synth(args) -> int:
    if args.spec is not None:
        with open(args.spec, "r", encoding="ascii") as f:
            spec = dataio.spec_from_json(json.load(f))
    elif args.preset == "slanted":
        spec = dataio.slanted_preset()
    else:
        spec = dataio.plane_preset()
    if args.seed is not None:
        spec.seed = args.seed
    sample = dataio.synth_scene(spec)

    os.makedirs(args.out, exist_ok=True)
    dataio.write_calibration(os.path.join(args.out, "calib.txt"),
                             sample.intrinsics, sample.baseline)
    for view in VIEWS:
        dataio.save_ppm(sample.images[view], os.path.join(args.out, f"{view}.ppm"))
        dataio.save_depth_pgm16(sample.gt_depth[view],
                                os.path.join(args.out, f"gt_depth_{view}.pgm"))
    dataio.write_pose_file(os.path.join(args.out, "gt_pose_stereo.txt"),
                           sample.gt_pose_stereo)
    dataio.write_pose_file(os.path.join(args.out, "gt_pose_temporal.txt"),
                           sample.gt_pose_temporal)
    manifest = os.path.join(args.out, "manifest.txt")
    dataio.write_manifest(manifest, "calib.txt", [f"{view}.ppm" for view in VIEWS])
    print(manifest)
    return 0


def _optimize_one(manifest: str, out_dir: str, config: OptimizeConfig,
                  figures: bool) -> str:
    sample = dataio.load_scene(manifest)
    state, trace = optimize_scene(sample, config)
    os.makedirs(out_dir, exist_ok=True)
    K = sample.intrinsics
    for view in VIEWS:
        field = state.disp[view]
        dataio.save_depth_pgm16(field.pixel_disparity(),
                                os.path.join(out_dir, f"disp_{view}.pgm"))
        depth = np.minimum(field.depth(K, sample.baseline), _STORE_MAX)
        dataio.save_depth_pgm16(depth, os.path.join(out_dir, f"depth_{view}.pgm"))
    dataio.write_pose_file(os.path.join(out_dir, "pose_stereo.txt"), state.pose_stereo)
    dataio.write_pose_file(os.path.join(out_dir, "pose_temporal.txt"), state.pose_temporal)
    mask_prob = 1.0 / (1.0 + np.exp(-state.mask_logits))
    dataio.save_depth_pgm16(mask_prob, os.path.join(out_dir, "mask.pgm"))

    trace_path = os.path.join(out_dir, "loss_trace.csv")
    with open(trace_path, "w", encoding="ascii") as f:
        f.write(TRACE_COLUMNS + "\n")
        for row in trace:
            f.write(f"{row.iteration},{row.scale},{row.lr!r},{row.image!r},"
                    f"{row.smooth!r},{row.consistency!r},{row.explainability!r},"
                    f"{row.total!r}\n")

    if figures:
        from . import figures as figmod
        if trace:
            figmod.save_loss_trace_figure(trace, os.path.join(out_dir, "loss_trace.png"))
        figmod.save_map_figure(state.disp["right"].pixel_disparity(),
                               os.path.join(out_dir, "disp_right.png"),
                               title="right-view disparity", units="px")
    return out_dir


def cmd_optimize(args) -> int:
    config = _config_from_args(args)
    jobs = 1 if args.deterministic else max(1, args.jobs)
    tasks = []
    for manifest in args.manifest:
        if len(args.manifest) == 1:
            out_dir = args.out
        else:
            stem = os.path.basename(os.path.dirname(os.path.abspath(manifest))) or "scene"
            out_dir = os.path.join(args.out, stem)
        tasks.append((manifest, out_dir, config, not args.no_figures))
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp
        with mp.Pool(min(jobs, len(tasks))) as pool:
            for out_dir in pool.starmap(_optimize_one, tasks):
                print(out_dir)
    else:
        for task in tasks:
            print(_optimize_one(*task))
    return 0


def cmd_postprocess(args) -> int:
    disp, valid = dataio.load_depth_pgm16(args.disp)
    disp_f, valid_f = dataio.load_depth_pgm16(args.disp_flipped)
    merged = evalkit.flip_merge(disp, disp_f)
    dataio.save_depth_pgm16(merged, args.out, valid & valid_f)
    if not args.no_figures:
        from . import figures as figmod
        stem, _ = os.path.splitext(args.out)
        figmod.save_map_figure(merged, stem + ".png", title="merged disparity",
                               units="px")
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    pred, pred_valid = dataio.load_depth_pgm16(args.pred)
    gt, gt_valid = dataio.load_depth_pgm16(args.gt)
    valid = gt_valid & pred_valid
    report = evalkit.eigen_metrics(pred, gt, valid, cap=args.cap)
    if args.calib is not None:
        K, baseline = dataio.parse_calibration(args.calib)
        pred_disp = np.where(pred > 0, K.fx * baseline / np.maximum(pred, 1e-6), 0.0)
        gt_disp = np.where(gt > 0, K.fx * baseline / np.maximum(gt, 1e-6), 0.0)
        report.d1_all = evalkit.d1_all(pred_disp, gt_disp, valid)

    text = report.as_csv_row() if args.format == "csv" else report.as_text()
    if args.format == "csv":
        print(",".join(evalkit.CSV_COLUMNS))
    print(text)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="ascii") as f:
            f.write(report.as_text() + "\n")
        with open(os.path.join(args.out, "report.csv"), "w", encoding="ascii") as f:
            f.write(",".join(evalkit.CSV_COLUMNS) + "\n" + report.as_csv_row() + "\n")
        if not args.no_figures:
            from . import figures as figmod
            figmod.save_error_map_figure(pred, gt, valid,
                                         os.path.join(args.out, "error_map.png"))
    return 0


def cmd_gradcheck(args) -> int:
    weights = LossWeights(args.weights.w_image, args.weights.w_ds, args.weights.w_lr,
                          args.weights.w_exp, alpha=args.alpha, c1=args.c1, c2=args.c2)
    results = run_gradcheck(seeds=range(args.seeds), size=args.size, eps=args.eps,
                            weights=weights, scales=args.scales,
                            negate_block=args.inject_sign_flip)
    failed = []
    for seed, report in results.items():
        for block, err in report.items():
            marker = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
            print(f"seed {seed:3d}  {block:18s} {err:.3e}  {marker}")
            if err >= GRADCHECK_TOLERANCE:
                failed.append((seed, block, err))
    if failed:
        print(f"{len(failed)} block(s) exceeded {GRADCHECK_TOLERANCE:g}:", file=sys.stderr)
        for seed, block, err in failed:
            print(f"  seed {seed}, block {block}: {err:.3e}", file=sys.stderr)
        return 1
    print(f"all blocks within {GRADCHECK_TOLERANCE:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthopt",
        description="Depth and pose recovery by direct photometric optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="scene spec JSON (overrides --preset)")
    p.add_argument("--preset", choices=("plane", "slanted"), default="plane")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="recover depth and poses for scenes")
    p.add_argument("manifest", nargs="+", help="scene manifest file(s)")
    p.add_argument("--out", required=True, help="output directory")
    _add_optim_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="serial execution with fixed reduction order")
    p.add_argument("--jobs", type=int, default=1, help="scenes optimized in parallel")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("postprocess", help="merge a disparity map with its flipped twin")
    p.add_argument("--disp", required=True, help="disparity PGM (unflipped inference)")
    p.add_argument("--disp-flipped", required=True,
                   help="disparity PGM from the flipped image, re-flipped back")
    p.add_argument("--out", required=True, help="merged disparity PGM path")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("eval", help="score a depth map against ground truth")
    p.add_argument("--pred", required=True, help="predicted depth PGM")
    p.add_argument("--gt", required=True, help="ground-truth depth PGM")
    p.add_argument("--cap", type=float, choices=(50.0, 80.0), default=80.0)
    p.add_argument("--calib", help="calibration file; enables D1-all in disparity space")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out", help="directory for report files and figures")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.85)
    p.add_argument("--c1", type=float, default=0.01)
    p.add_argument("--c2", type=float, default=0.03)
    p.add_argument("--weights", type=_parse_weights, default=LossWeights(),
                   metavar="K=V[,K=V...]")
    p.add_argument("--inject-sign-flip", metavar="BLOCK", default=None,
                   help="negate one analytic gradient block (harness sanity check)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OptimizationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
