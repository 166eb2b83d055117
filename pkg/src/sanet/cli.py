"""``sanet`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 self-test
failure.
"""

import argparse
import hashlib
import os
import sys

import numpy as np

from . import imageio as io
from .bench import bench, format_environment
from .blocks import WeightError
from .model import (PREFIXES, ModelConfig, build, describe, impulse_support, multi_scale_infer,
                    prefix_chain, receptive_field)
from .tensor import ShapeError, argmax_channels
from .weights import StfError, init_weights, read_stf, write_stf

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SELFTEST = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; this CLI reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_size(text):
    """``"HxW"`` -> (H, W)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def parse_scales(text):
    try:
        scales = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"scales must be comma-separated numbers, got {text!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise argparse.ArgumentTypeError(f"scales must be positive, got {text!r}")
    return scales


def on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")
    return text == "on"


def _config(args):
    return ModelConfig(args.variant, num_classes=args.classes)


def _load_weights(args, cfg):
    if getattr(args, "weights", None) is None:
        return init_weights(cfg, 0)
    return read_stf(args.weights)


def digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# commands


def cmd_infer(args):
    cfg = _config(args)
    model = build(cfg, read_stf(args.weights), fold_bn=True)
    img = io.read_image(args.image)
    if img.shape[1] != 3:
        raise io.ImageFormatError(f"{args.image}: inference needs an RGB (P6) image")
    probs = multi_scale_infer(model, io.preprocess(img), args.scales)
    labels = argmax_channels(probs)
    palette = io.read_palette(args.palette) if args.palette else io.default_palette(cfg.num_classes)
    io.write_image(io.colorize(labels, palette), args.out)
    h, w = labels.shape
    print(f"wrote {args.out} ({h}x{w}, scales {','.join('%g' % s for s in args.scales)})")


def cmd_bench(args):
    cfg = _config(args)
    model = build(cfg, _load_weights(args, cfg), fold_bn=args.fold_bn)
    report, out = bench(model, args.size, args.iters, args.warmup, args.threads, args.seed)
    print(format_environment())
    print(report.format())
    print(f"output_sha256   {digest(out)}")
    if args.report:
        report.write_json(args.report)


def cmd_describe(args):
    model = build(_config(args), None)
    print(describe(model, args.size).format())


def cmd_rf(args):
    model = build(_config(args), None)
    print(f"SANet-{args.variant.upper()}  probe {args.size[0]}x{args.size[1]}")
    print(f"{'prefix':<8}{'analytic':>12}{'impulse':>12}  note")
    for prefix in PREFIXES:
        rf = receptive_field(prefix_chain(model, prefix))
        box = impulse_support(model, prefix, args.size)
        clipped = (box.height, box.width) != rf
        note = "clipped by image border" if clipped else "exact"
        print(f"{prefix:<8}{'%dx%d' % rf:>12}{'%dx%d' % (box.height, box.width):>12}  {note}")


def cmd_selftest(args):
    from .selftest import gradcheck_suite, kernel_suites

    results = kernel_suites(args.cases, args.seed) + [gradcheck_suite(args.seeds)]
    for r in results:
        print(r.format())
    ok = all(r.passed for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_SELFTEST


def cmd_gradcheck(args):
    from .selftest import sad_gradcheck

    worst = 0.0
    for seed in range(args.seeds):
        rep = sad_gradcheck(seed, eps=args.eps)
        worst = max(worst, rep.worst_rel)
        print(f"seed {seed:<3} " + "  ".join(f"{k}={v:.2e}" for k, v in rep.max_rel.items()))
    ok = worst <= args.tol
    print(f"gradcheck {'passed' if ok else 'FAILED'}: worst rel err {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_SELFTEST


def cmd_export_random(args):
    cfg = _config(args)
    store = init_weights(cfg, args.seed)
    write_stf(store, args.out)
    print(f"wrote {args.out}: {len(store)} tensors, {sum(v.size for v in store.values()):,} parameters")


def cmd_eval(args):
    from .losses import confusion_matrix, miou

    names = sorted(f for f in os.listdir(args.pred_dir) if not f.startswith("."))
    if not names:
        raise FileNotFoundError(f"no prediction files in {args.pred_dir}")
    cm = np.zeros((args.classes, args.classes), np.int64)
    for name in names:
        label_path = os.path.join(args.label_dir, name)
        if not os.path.exists(label_path):
            raise FileNotFoundError(f"no label file matching prediction {name!r} in {args.label_dir}")
        cm += confusion_matrix(io.read_class_map(os.path.join(args.pred_dir, name)),
                               io.read_class_map(label_path), args.classes, args.ignore)
    res = miou(None, None, args.classes, confusion=cm)
    print(f"images {len(names)}")
    for c, v in enumerate(res.iou):
        print(f"class {c:<3} iou {'absent' if np.isnan(v) else '%.4f' % v}")
    print(f"miou {res.mean:.4f}")


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="sanet", description="SANet segmentation engine")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(sp):
        sp.add_argument("--variant", choices=("s", "m"), default="s", type=str.lower)
        sp.add_argument("--classes", type=int, default=19)

    sp = sub.add_parser("infer", help="segment one image and write a colour map")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scales", type=parse_scales, default=[1.0])
    sp.add_argument("--palette")
    model_args(sp)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("bench", help="time single-image inference")
    sp.add_argument("--weights", help="STF file (default: init_weights seed 0)")
    sp.add_argument("--size", type=parse_size, default=(1024, 2048), help="HxW (default 1024x2048)")
    sp.add_argument("--iters", type=int, default=30)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--fold-bn", type=on_off, default=True, metavar="on|off")
    sp.add_argument("--threads", choices=("single", "auto"), default="single")
    sp.add_argument("--seed", type=int, default=0, help="seed of the synthetic input")
    sp.add_argument("--report", help="also write the report as JSON")
    model_args(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("describe", help="per-stage shapes, parameters and receptive fields")
    sp.add_argument("--size", type=parse_size, default=(1024, 2048))
    model_args(sp)
    sp.set_defaults(fn=cmd_describe)

    sp = sub.add_parser("rf", help="analytic and impulse receptive fields of L3, DP2, L6")
    sp.add_argument("--size", type=parse_size, default=(1024, 1024), help="probe size HxW")
    model_args(sp)
    sp.set_defaults(fn=cmd_rf)

    sp = sub.add_parser("selftest", help="kernel oracle suites and SAD gradient check")
    sp.add_argument("--cases", type=int, default=100)
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_selftest)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the SAD backward pass")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("export-random", help="write deterministic random weights as STF")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    model_args(sp)
    sp.set_defaults(fn=cmd_export_random)

    sp = sub.add_parser("eval", help="mIoU over paired P5 class maps")
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--label-dir", required=True)
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--ignore", type=int, default=255)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    try:
        code = args.fn(args)
    except (OSError, io.ImageFormatError, StfError, WeightError, ShapeError, ValueError, KeyError) as exc:
        print(f"sanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
