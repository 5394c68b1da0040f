"""Command-line front end: match, detect, train, eval, synth, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from stereovis.imgio import GrayImage, StereoPair, load_image, save_image
from stereovis.pipeline import (
    PipelineConfig,
    disparity_to_image,
    evaluate_disparity,
    pfm_to_disparity,
    read_pfm,
    run_frame,
    run_sequence,
    write_pfm,
)
from stereovis.recog import CascadeConfig, CascadeModel, train_cascade
from stereovis.synth import SceneObstacle, SceneSpec, generate_synthetic_scene

log = logging.getLogger("stereovis")


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "dmax", None):
        config.d_max = args.dmax
    if getattr(args, "width", None):
        config.concurrency_width = args.width
    return config


def _load_pair(left, right) -> StereoPair:
    return StereoPair(load_image(left), load_image(right))


def cmd_match(args) -> int:
    from stereovis.pipeline import compute_disparity

    config = _load_config(args)
    pair = _load_pair(args.left, args.right)
    disp, _, _ = compute_disparity(pair, config)
    save_image(disparity_to_image(disp), args.output)
    if args.pfm:
        values = disp.disparity.astype(np.float64)
        values[~disp.valid] = 0.0
        write_pfm(args.pfm, values)
    print(f"disparity written to {args.output}")
    return 0


def _draw_box(pixels, x, y, w, h, value, thickness=1):
    x1, y1 = x + w - 1, y + h - 1
    for t in range(thickness):
        xs = slice(max(x - t, 0), min(x1 + t, pixels.shape[1] - 1) + 1)
        ys = slice(max(y - t, 0), min(y1 + t, pixels.shape[0] - 1) + 1)
        pixels[max(y - t, 0), xs] = value
        pixels[min(y1 + t, pixels.shape[0] - 1), xs] = value
        pixels[ys, max(x - t, 0)] = value
        pixels[ys, min(x1 + t, pixels.shape[1] - 1)] = value


def cmd_detect(args) -> int:
    config = _load_config(args)
    model = None
    model_path = args.model or config.model_path
    if model_path:
        model = CascadeModel.load(model_path)
    else:
        log.warning("running without a cascade model: detections will be empty")
    pair = _load_pair(args.left, args.right)
    result = run_frame(pair, config, model)
    record = result.to_record(config, include_timings=args.timings)
    Path(args.output).write_text(
        json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
    )
    if args.annotated:
        canvas = pair.left.pixels.copy()
        for roi in result.rois:
            _draw_box(canvas, roi.x, roi.y, roi.w, roi.h, 200)
        for det in result.detections:
            _draw_box(canvas, det["x"], det["y"], det["w"], det["h"], 255, thickness=2)
        save_image(GrayImage(canvas), args.annotated)
    print(
        f"frame: {len(result.rois)} ROIs, {len(result.detections)} detections "
        f"-> {args.output}"
    )
    return 0


def cmd_train(args) -> int:
    config = CascadeConfig(stages=args.stages, max_depth=args.max_depth)
    model = train_cascade(args.pos, args.neg, config)
    model.save(args.output)
    stats = ", ".join(
        f"stage {i}: fa={s.false_alarm:.3f} hit={s.hit_rate:.3f}"
        for i, s in enumerate(model.stages)
    )
    print(f"trained {len(model.stages)} stages -> {args.output}")
    print(stats)
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = sorted(pred_dir.glob("*.pfm"))
    if not preds:
        print(f"no .pfm predictions in {pred_dir}", file=sys.stderr)
        return 1
    per_image = []
    for p in preds:
        gt_path = gt_dir / p.name
        if not gt_path.is_file():
            log.warning("no ground truth for %s, skipped", p.name)
            continue
        pred_vals = read_pfm(p)
        gt_vals = read_pfm(gt_path)
        d_max = max(int(np.nanmax(pred_vals)), int(np.nanmax(gt_vals)), 1)
        rate = evaluate_disparity(
            pfm_to_disparity(pred_vals, d_max), pfm_to_disparity(gt_vals, d_max), args.tau
        )
        per_image.append({"name": p.name, "error_rate": rate})
    if not per_image:
        print("nothing evaluated", file=sys.stderr)
        return 1
    mean_rate = float(np.mean([e["error_rate"] for e in per_image]))
    report = {"per_image": per_image, "mean_error_rate": mean_rate, "tau": args.tau}
    Path(args.output).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"mean error rate {mean_rate:.4f} over {len(per_image)} images -> {args.output}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    obstacles = []
    for spec in args.obstacle or []:
        parts = [float(v) for v in spec.split(",")]
        dist = parts[0]
        lateral = int(parts[1]) if len(parts) > 1 else 0
        size = int(parts[2]) if len(parts) > 2 else 60
        obstacles.append(SceneObstacle(dist, lateral, size, size))
    spec = SceneSpec(
        width=args.size[0],
        height=args.size[1],
        focal_px=args.focal,
        baseline_m=args.baseline,
        camera_height_m=args.camera_height,
        obstacles=obstacles,
        seed=args.seed,
    )
    pair, gt, boxes = generate_synthetic_scene(spec)
    stem = f"{args.index:03d}"
    save_image(pair.left, out / f"{stem}_left.pgm")
    save_image(pair.right, out / f"{stem}_right.pgm")
    write_pfm(out / f"{stem}_gt.pfm", gt.disparity.astype(np.float64))
    (out / f"{stem}_boxes.json").write_text(
        json.dumps([b.to_dict() for b in boxes], indent=2)
    )
    print(f"scene written to {out}/{stem}_*")
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args)
    config.d_max = args.dmax
    spec = SceneSpec(width=args.size[0], height=args.size[1], obstacles=[SceneObstacle(10.0)])
    pair, _, _ = generate_synthetic_scene(spec)
    t0 = time.perf_counter()
    stage_sums: dict = {}
    for _ in range(args.frames):
        result = run_frame(pair, config)
        for k, v in result.timings.items():
            stage_sums[k] = stage_sums.get(k, 0.0) + v
    total = time.perf_counter() - t0
    print(f"{args.frames} frames at {spec.width}x{spec.height}, d_max={config.d_max}")
    for k in sorted(stage_sums):
        print(f"  {k:>10}: {stage_sums[k] / args.frames:8.1f} ms/frame")
    print(f"  throughput: {args.frames / total:.2f} fps")
    return 0


def _size(text: str):
    w, h = text.lower().split("x")
    return int(w), int(h)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereovis",
        description="Stereo perception: dense disparity, road model, obstacle detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="stereo pair -> disparity image")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--dmax", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pfm", default=None, help="also write exact float disparities")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("detect", help="stereo pair -> detection record JSON")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--dmax", type=int, default=None)
    p.add_argument("--width", type=int, default=None, help="pipeline concurrency width")
    p.add_argument("--timings", action="store_true", help="include timings in the record")
    p.add_argument("--annotated", default=None, help="write annotated left image")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="train the cascade from window corpora")
    p.add_argument("--pos", required=True, help="directory of positive windows")
    p.add_argument("--neg", required=True, help="directory of negative windows")
    p.add_argument("--stages", type=int, default=17)
    p.add_argument("--max-depth", type=int, default=2)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare predicted vs ground-truth disparities")
    p.add_argument("--pred", required=True, help="directory of predicted .pfm files")
    p.add_argument("--gt", required=True, help="directory of ground-truth .pfm files")
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic road scene")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--size", type=_size, default=(256, 192), help="WxH")
    p.add_argument("--focal", type=float, default=500.0, help="focal length in pixels")
    p.add_argument("--baseline", type=float, default=0.12)
    p.add_argument("--camera-height", type=float, default=1.5)
    p.add_argument("--obstacle", action="append", help="dist_m[,lateral_px[,size_px]]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=0, help="frame number for file names")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="timing report on a synthetic scene")
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--size", type=_size, default=(256, 192))
    p.add_argument("--dmax", type=int, default=16)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
