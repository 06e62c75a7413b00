"""Command line entry point: ``darkyolo inspect | detect | eval``.

Exit codes: 0 success, 1 partial failure (some frames failed), 2
configuration or parse error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .decode import load_names
from .engine import activation_cache_plan, peak_live_buffers
from .estimator import YoloDetector, bundled_path
from .evalkit import ACCURACY_MODES, DEFAULT_MATCH_IOU, report
from .exceptions import NetDefError, ShapeError, WeightsError
from .netdef import conv_float_count, expected_float_count, infer_shapes, load_netdef, load_weights
from .pipeline import (
    PREPROCESS_MODES,
    RunConfig,
    default_video_name,
    file_digest,
    ingest_frames,
    latency_summary,
    run_sequence,
)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
MALFORMED_LIMIT = 0.01

log = logging.getLogger("darkyolo")


def _resized(definition, size):
    if size is None:
        return definition
    return replace(definition, input_shape=(definition.input_shape[0], size, size))


def cmd_inspect(args, out=sys.stdout):
    definition = _resized(load_netdef(args.netdef), args.size)
    shapes = infer_shapes(definition)
    c, h, w = definition.input_shape
    print(f"input: {c}x{h}x{w}", file=out)
    print(f"{'idx':>4}  {'kind':<14} {'output':>16}  {'params':>10}  detail", file=out)
    in_channels = [c] + [s[0] for s in shapes[:-1]]
    total = 0
    for layer in definition.layers:
        i = layer.index
        n_params = 0
        detail = ""
        if layer.kind == "convolutional":
            n_params = conv_float_count(layer, in_channels[i])
            detail = (f"{layer['size']}x{layer['size']}/{layer['stride']} "
                      f"{'bn ' if layer.batch_normalize else ''}{layer.activation}")
        elif layer.kind in ("route", "shortcut"):
            detail = "from " + ",".join(str(r) for r in layer.references)
        elif layer.kind == "yolo":
            grid = shapes[i][1]
            detail = (f"grid {grid}x{shapes[i][2]} stride {h // grid} "
                      f"channels {shapes[i][0]} mask {','.join(map(str, layer['mask']))}")
        total += n_params
        shape = "x".join(str(v) for v in shapes[i])
        print(f"{i:>4}  {layer.kind:<14} {shape:>16}  {n_params:>10}  {detail}", file=out)
    n_floats = expected_float_count(definition)
    print(f"{len(definition)} layers, {len(definition.yolo_indices)} detection heads", file=out)
    print(f"total parameters: {total}", file=out)
    print(f"expected weights floats: {n_floats}", file=out)
    if args.weights:
        graph = load_weights(args.weights, definition)
        plan = activation_cache_plan(graph)
        print(f"weights: {n_floats} floats consumed exactly "
              f"(header {graph.header.major}.{graph.header.minor}.{graph.header.revision}, "
              f"seen {graph.header.images_seen})", file=out)
        print(f"peak live activation buffers: {peak_live_buffers(plan)}", file=out)
    return EXIT_OK


def _run_config(args):
    return RunConfig(
        netdef=args.netdef, weights=args.weights, names=args.names,
        score_threshold=args.score_thresh, nms_threshold=args.nms_thresh,
        input_size=args.size, mode=args.mode, out_dir=args.out,
        workers=args.workers, compat_256_scale=args.compat_256_scale,
    )


def cmd_detect(args, out=sys.stdout):
    config = _run_config(args)
    detector = YoloDetector(
        netdef=args.netdef, weights=args.weights, names=args.names,
        score_threshold=args.score_thresh, nms_threshold=args.nms_thresh,
        input_size=args.size, mode=args.mode, compat_256_scale=args.compat_256_scale,
    ).fit()
    source = Path(args.input)
    if not source.exists():
        raise FileNotFoundError(f"input {source} does not exist")
    reader = ingest_frames(source)
    frames = list(reader)
    video = args.video or default_video_name(source)
    records = run_sequence(detector.graph_, frames, config, detector.class_names_,
                           video=video, weights_digest=file_digest(args.weights))
    stats = latency_summary(records)
    failed = sum(1 for r in records if r.error)
    n_dets = sum(len(r.detections) for r in records)
    print(f"frames: {len(records)} processed, {failed} failed, "
          f"{len(reader.skipped)} skipped; detections: {n_dets}", file=out)
    if stats["frames"]:
        print(f"latency ms: mean {stats['mean_ms']:.1f}  median {stats['median_ms']:.1f}  "
              f"max {stats['max_ms']:.1f}  fps {stats['fps']:.2f}", file=out)
    else:
        print("latency ms: n/a (no frames)", file=out)
    print(f"records: {Path(config.out_dir) / 'records.jsonl'}", file=out)
    if args.verbose:
        for r in records:
            for d in r.detections:
                print(f"  frame {r.frame_id} {d.class_name or d.class_id} {d.confidence:.3f} "
                      + " ".join(f"{v:.1f}" for v in d.box.coords), file=out)
    if failed or reader.skipped:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args, out=sys.stdout):
    rep = report(args.records, args.gt, iou_threshold=args.iou, accuracy_mode=args.accuracy_mode)
    names = load_names(args.names) if args.names else load_names(bundled_path("coco.names"))
    text = rep.render(names)
    print(text, file=out)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = rep.as_dict()
        payload["config"] = {"records": [str(p) for p in args.records], "gt": str(args.gt),
                             "iou_threshold": args.iou, "accuracy_mode": args.accuracy_mode}
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        path.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    if rep.total_lines and rep.malformed_lines / rep.total_lines > MALFORMED_LIMIT:
        print(f"error: {rep.malformed_lines} of {rep.total_lines} lines malformed", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _add_model_flags(p, size_default):
    p.add_argument("--netdef", default=bundled_path("yolov3.cfg"),
                   help="network definition file (default: bundled yolov3.cfg)")
    p.add_argument("--size", type=int, default=size_default, help="square input size")


def build_parser():
    parser = argparse.ArgumentParser(prog="darkyolo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    # also accepted after the subcommand, without clobbering the top-level flag
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", parents=[common],
                       help="print the layer table and check a weights file")
    _add_model_flags(p, None)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("detect", parents=[common],
                       help="detect objects on an image or a frame directory")
    _add_model_flags(p, 416)
    p.add_argument("input", help="image file or directory of frames")
    p.add_argument("--weights", required=True)
    p.add_argument("--names", default=bundled_path("coco.names"))
    p.add_argument("--score-thresh", type=float, default=0.6)
    p.add_argument("--nms-thresh", type=float, default=0.6)
    p.add_argument("--mode", choices=PREPROCESS_MODES, default="stretch")
    p.add_argument("--out", default="detections")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--compat-256-scale", action="store_true",
                   help="scale normalised boxes to 0..256 instead of the image size")
    p.add_argument("--video", help="sequence name written to the records header")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="score record files against ground truth")
    p.add_argument("records", nargs="+")
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=DEFAULT_MATCH_IOU)
    p.add_argument("--accuracy-mode", choices=ACCURACY_MODES, default="box")
    p.add_argument("--names")
    p.add_argument("--out", help="write the report as JSON (and a .txt rendering)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out=out)
    except (NetDefError, WeightsError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
