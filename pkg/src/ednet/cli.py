"""``ednet`` command line.

Exit codes: 0 ok, 2 usage, 3 data or schema error, 4 internal error or failed check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import arch
from .arch import VARIANT_SCALES
from .blocks import SchemaError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
VARIANTS = tuple(VARIANT_SCALES) + ("xl",)

log = logging.getLogger("ednet")


class DataError(Exception):
    """Bad user-supplied data; maps to exit code 3."""


def _emit(obj, args) -> None:
    print(json.dumps(obj, indent=2 if getattr(args, "pretty", False) else None))


def _graph(args) -> arch.NetGraph:
    if getattr(args, "config", None):
        from .io import load_config
        return arch.build_variant(load_config(args.config))
    return arch.build(args.variant)


def _weights(args, g: arch.NetGraph):
    if getattr(args, "weights", None):
        from .io import load_weights
        w = load_weights(args.weights)
        arch.validate_weights(g, w)
        return w
    return arch.init_weights(g, seed=args.seed, include_aux=False)


# -- subcommands ---------------------------------------------------------------------

def cmd_summary(args) -> int:
    g = _graph(args)
    size = (args.size, args.size)
    if args.json:
        _emit(arch.summary_json(g, size), args)
    else:
        print(arch.summary_text(g, size))
    return EXIT_OK


def cmd_detect(args) -> int:
    from .decode import decode
    from .io import draw_boxes, letterbox, load_image, read_detections, save_image, write_jsonl
    from .quant import is_quantized, quantized_forward
    from .scenes import inject_oracle

    g = _graph(args)
    img = load_image(args.image)
    canvas, lb = letterbox(img, args.size)
    if args.inject_gt:
        gts = read_detections(args.inject_gt, require_score=False)
        boxes = [(lb.forward_box(d.box), d.class_id) for _, d in gts]
        maps = inject_oracle(boxes, (args.size, args.size), g.head_strides, g.config.num_classes, g.config.reg_bins)
    else:
        w = _weights(args, g)
        maps = quantized_forward(g, w, canvas) if is_quantized(w) else arch.forward(g, w, canvas)
    dets = decode(maps, g.head_strides, conf_thresh=args.conf, top_k=args.top_k, reg_bins=g.config.reg_bins)
    dets = [lb.inverse_detection(d) for d in dets]
    image_id = args.image_id if args.image_id is not None else Path(args.image).stem
    rows = [d.to_json(image_id) for d in dets]
    if args.out_json:
        write_jsonl(args.out_json, rows)
    if args.out_ppm:
        save_image(args.out_ppm, draw_boxes(img, [d.box for d in dets]))
    _emit({"image": str(args.image), "count": len(rows), "detections": rows}, args)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import read_detections
    from .metrics import EvalSample, IOU_RANGE, map_at, mean_ap, per_class_ap

    preds = read_detections(args.pred)
    gts = read_detections(args.gt, require_score=False)
    ids: List = []
    for iid, _ in gts + preds:
        if iid not in ids:
            ids.append(iid)
    samples = [EvalSample([d for i, d in preds if i == iid], [(d.box, d.class_id) for i, d in gts if i == iid])
               for iid in ids]
    thr = 0.5 if args.iou == "coco" else float(args.iou)
    ap = per_class_ap(samples, thr)
    pred_classes = {d.class_id for _, d in preds}
    report = {
        "iou": args.iou,
        "images": len(samples),
        "per_class_ap": {str(k): v for k, v in ap.items()},
        f"map@{thr:g}": mean_ap(ap),
        "map50": map_at(samples, 0.5),
        "map50_95": float(np.mean([map_at(samples, t) for t in IOU_RANGE])),
        "skipped_classes": sorted(c for c in pred_classes if str(c) not in {str(k) for k in ap}),
    }
    _emit(report, args)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import default_threads, run_bench
    from .quant import is_quantized, quantize_model
    from .scenes import generate_scene

    g = _graph(args)
    w = _weights(args, g)
    if args.quantized and not is_quantized(w):
        calib = generate_scene(args.seed, size=(args.size, args.size)).image
        w, _ = quantize_model(g, w, [calib], compare=False)
    rep = run_bench(g, w, args.size, args.iters, args.warmup, args.threads or default_threads(), args.e2e, args.seed)
    _emit(rep.to_json(), args)
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .io import letterbox, load_image, save_weights
    from .quant import quantize_model
    from .scenes import generate_scene

    g = _graph(args)
    w = _weights(args, g)
    if args.calib_dir:
        files = sorted(p for p in Path(args.calib_dir).iterdir() if p.suffix.lower() in (".ppm", ".png"))
        if not files:
            raise DataError(f"no .ppm/.png calibration images in {args.calib_dir}")
        images = [letterbox(load_image(p), args.size)[0] for p in files[:args.calib_count]]
    else:
        images = [generate_scene(args.seed + i, size=(args.size, args.size)).image for i in range(args.calib_count)]
    qset, report = quantize_model(g, w, images, percentile=args.percentile, compare=not args.no_compare)
    save_weights(args.out, qset)
    out = report.to_json()
    out["out"] = str(args.out)
    if not args.verbose_layers:
        out.pop("layers")
    _emit(out, args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .loss import gradcheck

    res = gradcheck(args.trials, args.seed, args.h, args.force_kink)
    out = res.to_json() | {"tolerance": args.tol, "passed": res.max_rel_error <= args.tol}
    _emit(out, args)
    return EXIT_OK if out["passed"] else EXIT_INTERNAL


def cmd_gen_scenes(args) -> int:
    from .scenes import generate_scene, save_scene

    h, w = args.size
    paths = []
    for i in range(args.count):
        sc = generate_scene(args.seed + i, args.objects, args.classes, (h, w))
        paths.append(str(save_scene(args.out, sc)))
    _emit({"out": str(args.out), "scenes": paths}, args)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _size_pair(s: str):
    try:
        parts = [int(v) for v in s.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or WxH, got {s!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"size must be N or WxH, got {s!r}")
    return parts[1], parts[0]


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ednet", description="CPU inference, loss and evaluation toolkit for EDNet.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=True):
        sp.add_argument("--variant", choices=VARIANTS, default="tiny", help="model variant")
        sp.add_argument("--config", help="variant config JSON (overrides --variant)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--pretty", action="store_true", help="indent JSON output")
        if weights:
            sp.add_argument("--weights", help="EDNW weight file (seeded random weights if omitted)")

    sp = sub.add_parser("summary", help="per-node shapes and parameter counts")
    common(sp, weights=False)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_summary)

    sp = sub.add_parser("detect", help="run detection on one image")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--conf", type=float, default=0.25)
    sp.add_argument("--top-k", type=int, default=300)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--out-json")
    sp.add_argument("--out-ppm")
    sp.add_argument("--image-id")
    sp.add_argument("--inject-gt", help="annotation JSONL; write ideal logits instead of running the network")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval", help="mAP of predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--iou", default="0.5", help="IoU threshold or 'coco' (0.50:0.05:0.95)")
    sp.add_argument("--pretty", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="forward latency")
    common(sp)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--iters", type=_positive, default=10)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--threads", type=_positive)
    sp.add_argument("--quantized", action="store_true")
    sp.add_argument("--e2e", action="store_true", help="include letterbox and decode in timings")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("quantize", help="INT8 post-training quantization")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--calib-dir")
    sp.add_argument("--calib-count", type=_positive, default=4)
    sp.add_argument("--percentile", type=float)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--no-compare", action="store_true", help="skip the float vs int8 detection check")
    sp.add_argument("--verbose-layers", action="store_true", help="include per-layer SQNR rows")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference WIoU v3 gradients")
    sp.add_argument("--trials", type=_positive, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--force-kink", action="store_true")
    sp.add_argument("--pretty", action="store_true")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-scenes", help="write synthetic scenes (PPM + JSONL annotations)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=_positive, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--objects", type=int, default=8)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--size", type=_size_pair, default=(640, 640), help="N or WxH")
    sp.add_argument("--pretty", action="store_true")
    sp.set_defaults(func=cmd_gen_scenes)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .io import FormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SchemaError as e:
        print(f"error: schema mismatch at slot {e.slot!r}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, DataError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort mapping to the documented exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
