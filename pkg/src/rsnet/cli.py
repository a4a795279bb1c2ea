"""Command-line entry point: ``rsnet <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 I/O or parse failure, 4 numerical failure,
5 network/weights mismatch.
"""
import argparse
import logging
import math
import os
import sys

from threadpoolctl import threadpool_limits

from . import anchors as anchors_mod
from . import data, head, metrics, network, reports
from .errors import DimensionError, FormatError, SpecMismatchError
from .train import NumericalError, detect, train

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 2, 3, 4, 5

log = logging.getLogger("rsnet")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _unit_interval(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _momentum(text):
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _loss_weights(text):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated numbers, got {text!r}")
    if len(vals) != 4 or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("expected 4 non-negative numbers: coord,obj,noobj,cls")
    return head.LossWeights(*vals)


# -- loaders that map failures onto exit codes ------------------------------------

def _load_spec(path, gmp_mode=None):
    try:
        spec = network.load_config(path)
    except OSError as exc:
        raise CommandError(f"cannot read config {path}: {exc}", EXIT_IO)
    except FormatError as exc:
        raise CommandError(str(exc), EXIT_IO)
    if gmp_mode is not None and gmp_mode != spec.gmp_mode:
        try:
            spec = network.NetworkSpec(spec.layers, gmp_mode, spec.input_size, spec.num_classes,
                                       spec.anchors_per_cell)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_USAGE)
    return spec


def _load_anchors(path, spec):
    try:
        anchors = anchors_mod.load_anchors(path)
    except OSError as exc:
        raise CommandError(f"cannot read anchors {path}: {exc}", EXIT_IO)
    except FormatError as exc:
        raise CommandError(str(exc), EXIT_IO)
    if len(anchors) != spec.anchors_per_cell:
        raise CommandError(f"{path} holds {len(anchors)} anchors, network expects "
                           f"{spec.anchors_per_cell}", EXIT_MISMATCH)
    return anchors


def _load_weights(spec, path):
    try:
        return data.load_weights(spec, path)
    except OSError as exc:
        raise CommandError(f"cannot read weights {path}: {exc}", EXIT_IO)
    except SpecMismatchError as exc:
        raise CommandError(str(exc), EXIT_MISMATCH)
    except FormatError as exc:
        raise CommandError(str(exc), EXIT_IO)


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise CommandError(f"{what} {path} is not a directory", EXIT_IO)


def _save(fn, *args):
    try:
        fn(*args)
    except OSError as exc:
        raise CommandError(f"write failed: {exc}", EXIT_IO)


# -- commands -------------------------------------------------------------------

def cmd_synth(args):
    try:
        samples = data.synth_dataset(args.n, args.size, args.classes, args.seed)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE)
    _save(data.write_dataset, samples, args.out)
    n_boxes = sum(len(s.boxes) for s in samples)
    print(f"wrote {len(samples)} images, {n_boxes} boxes to {args.out}")


def cmd_config(args):
    try:
        if args.table1:
            spec = network.build_table1(args.gmp_mode, args.input, args.classes,
                                        args.anchors_per_cell)
        else:
            spec = network.build_tiny(args.stages, args.base, args.input, args.classes,
                                      args.anchors_per_cell, args.gmp_mode)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE)
    if args.out == "-":
        sys.stdout.write(network.format_config(spec))
    else:
        _save(network.save_config, spec, args.out)
        print(f"wrote {args.out}: {spec.conv_count} convs, grid {spec.grid_size}, "
              f"{network.parameter_count(spec)} parameters")


def _corpus_shapes(directory, grid):
    _require_dir(directory, "label directory")
    shapes = []
    names = sorted(f for f in os.listdir(directory) if f.endswith(".txt"))
    if not names:
        raise CommandError(f"no label files in {directory}", EXIT_IO)
    for name in names:
        path = os.path.join(directory, name)
        try:
            boxes = data.load_labels(path)
            ppm = path[:-4] + ".ppm"
            # letterboxing rescales non-square images by their longer side
            sw = sh = 1.0
            if os.path.exists(ppm):
                w, h = data.ppm_size(ppm)
                sw, sh = w / max(w, h), h / max(w, h)
        except OSError as exc:
            raise CommandError(f"cannot read {path}: {exc}", EXIT_IO)
        except (FormatError, ValueError) as exc:
            raise CommandError(str(exc), EXIT_IO)
        shapes.extend((b.w * sw * grid, b.h * sh * grid) for b in boxes)
    return shapes


def cmd_anchors(args):
    grid = args.grid
    if args.config:
        grid = _load_spec(args.config).grid_size
    shapes = _corpus_shapes(args.data, grid)
    if not shapes:
        raise CommandError(f"no boxes found under {args.data}", EXIT_IO)
    try:
        found = anchors_mod.kmeans_anchors(shapes, args.k, args.seed)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE)
    _save(anchors_mod.save_anchors, found, args.out)
    print(f"avg_iou={anchors_mod.avg_iou(shapes, found):.4f}")
    for a in found:
        print(f"{a.p_w:.6f} {a.p_h:.6f}")


def _load_samples(args, spec):
    if args.synthetic:
        try:
            return data.synth_dataset(args.synthetic, spec.input_size, spec.num_classes, args.seed)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_USAGE)
    if not args.data:
        raise CommandError("one of --data or --synthetic is required", EXIT_USAGE)
    _require_dir(args.data, "dataset")
    try:
        samples = data.load_dataset(args.data, spec.input_size)
    except OSError as exc:
        raise CommandError(f"cannot read dataset: {exc}", EXIT_IO)
    except FormatError as exc:
        raise CommandError(str(exc), EXIT_IO)
    if not samples:
        raise CommandError(f"no .ppm images in {args.data}", EXIT_IO)
    return samples


def cmd_train(args):
    spec = _load_spec(args.config, args.gmp_mode)
    anchors = _load_anchors(args.anchors, spec)
    samples = _load_samples(args, spec)
    os.makedirs(args.out, exist_ok=True)
    weights_path = args.weights or os.path.join(args.out, "weights.rsnw")
    params = network.init_params(spec, args.seed, args.init_gain)

    def checkpoint(it, p):
        stem, ext = os.path.splitext(weights_path)
        _save(data.save_weights, spec, p, f"{stem}_{it:06d}{ext or '.rsnw'}")

    try:
        params, history = train(spec, params, samples, anchors, args.iters, args.lr, args.momentum,
                                args.batch, args.seed, args.loss_weights, args.ignore_iou,
                                args.objectness_target, args.checkpoint_every, checkpoint,
                                args.clip or None)
    except NumericalError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC)
    _save(data.save_weights, spec, params, weights_path)
    if history:
        _save(reports.emit_loss_curve, history, args.out)
        print(f"iterations={len(history)} first_loss={history[0][1]:.6f} "
              f"final_loss={history[-1][1]:.6f}")
    print(f"weights={weights_path}")


def _detection_inputs(args, spec):
    paths = list(args.images)
    if args.data:
        _require_dir(args.data, "image directory")
        paths += [os.path.join(args.data, i + ".ppm") for i in data.list_images(args.data)]
    if not paths:
        raise CommandError("no images given (pass paths or --data)", EXIT_USAGE)
    samples = []
    for path in paths:
        try:
            img = data.load_image_ppm(path)
        except OSError as exc:
            raise CommandError(f"cannot read image {path}: {exc}", EXIT_IO)
        except FormatError as exc:
            raise CommandError(str(exc), EXIT_IO)
        canvas, rec = data.letterbox(img, spec.input_size)
        image_id = os.path.splitext(os.path.basename(path))[0]
        samples.append(data.Sample(canvas, [], image_id, rec))
    return samples


def cmd_detect(args):
    spec = _load_spec(args.config, args.gmp_mode)
    anchors = _load_anchors(args.anchors, spec)
    params = _load_weights(spec, args.weights)
    samples = _detection_inputs(args, spec)
    try:
        dets = detect(spec, params, anchors, samples, args.conf, args.nms)
    except DimensionError as exc:
        raise CommandError(str(exc), EXIT_MISMATCH)
    text = metrics.format_detections(dets)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        _save(_write_text, args.out, text)
        print(f"images={len(samples)} detections={len(dets)} file={args.out}")


def _write_text(path, text):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_ground_truth(directory, image_size=None):
    """Pixel-space truths and image ids from ``<id>.txt`` (+ ``<id>.ppm``) files."""
    truths, ids = [], []
    for name in sorted(f for f in os.listdir(directory) if f.endswith(".txt")):
        image_id = name[:-4]
        path = os.path.join(directory, name)
        ppm = os.path.join(directory, image_id + ".ppm")
        if os.path.exists(ppm):
            w, h = data.ppm_size(ppm)
        elif image_size:
            w, h = image_size
        else:
            raise FormatError(f"no {image_id}.ppm for image size; pass --image-size", path=path)
        ids.append(image_id)
        for b in data.load_labels(path):
            truths.append(metrics.Truth(image_id, b.class_id,
                                        ((b.cx - b.w / 2) * w, (b.cy - b.h / 2) * h,
                                         (b.cx + b.w / 2) * w, (b.cy + b.h / 2) * h)))
    return truths, ids


def cmd_eval(args):
    _require_dir(args.data, "ground-truth directory")
    try:
        truths, ids = load_ground_truth(args.data, args.image_size)
        with open(args.detections, "rb") as fh:
            dets = metrics.parse_detections(fh.read(), path=args.detections)
    except OSError as exc:
        raise CommandError(f"cannot read inputs: {exc}", EXIT_IO)
    except (FormatError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_IO)
    names = args.names.split(",") if args.names else None
    classes = sorted({t.class_id for t in truths} | {d.class_id for d in dets}
                     | set(range(len(names or []))))
    num_images = max(1, len(set(ids) | {d.image_id for d in dets}))
    report = metrics.build_report(dets, truths, classes, num_images, args.iou)
    _save(reports.write_report, report, args.out, names)
    for line in reports.summary_lines(report, names):
        print(line)


def _read_ap_table(directory):
    path = os.path.join(directory, "per_class_ap.csv")
    rows = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for lineno, line in enumerate(fh, start=2):
            cells = dict(zip(header, line.rstrip("\n").split(",")))
            try:
                if cells.get("ap50"):
                    rows[cells["name"]] = float(cells["ap50"])
            except (KeyError, ValueError):
                raise FormatError("bad row", path=path, line=lineno) from None
    return rows


def cmd_compare(args):
    if len(args.labels) != len(args.reports):
        raise CommandError("--labels must name every report directory", EXIT_USAGE)
    tables = []
    for d in args.reports:
        try:
            tables.append(_read_ap_table(d))
        except OSError as exc:
            raise CommandError(f"cannot read report in {d}: {exc}", EXIT_IO)
        except FormatError as exc:
            raise CommandError(str(exc), EXIT_IO)
    classes = sorted(set().union(*tables))
    lines = ["metric," + ",".join(args.labels)]
    maps = [sum(t.values()) / len(t) if t else 0.0 for t in tables]
    lines.append("mAP," + ",".join(f"{m:.4f}" for m in maps))
    for c in classes:
        lines.append(f"AP50[{c}]," + ",".join(
            f"{t[c]:.4f}" if c in t else "" for t in tables))
    text = "\n".join(lines) + "\n"
    if args.out:
        _save(_write_text, args.out, text)
    print(" ".join(f"mAP[{label}]={m:.4f}" for label, m in zip(args.labels, maps)))
    sys.stdout.write(text)


# -- parser -----------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rsnet", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic PPM + label dataset", formatter_class=fmt)
    p.add_argument("--n", type=_positive_int, default=32, help="number of images")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--classes", type=int, default=2, help="number of object classes (1-3)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="write a network config", formatter_class=fmt)
    p.add_argument("--table1", action="store_true", help="full 52-conv backbone instead of tiny")
    p.add_argument("--stages", type=int, default=3, help="tiny net stage count (2-5)")
    p.add_argument("--base", type=int, default=8, help="tiny net base filter count")
    p.add_argument("--input", type=int, default=64, help="square input size")
    p.add_argument("--classes", type=_positive_int, default=2, help="number of classes")
    p.add_argument("--anchors-per-cell", type=_positive_int, default=2, help="anchors per cell")
    p.add_argument("--gmp-mode", choices=network.GMP_MODES, default="broadcast",
                   help="global max pooling interpretation")
    p.add_argument("--out", default="-", help="config path ('-' for stdout)")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("anchors", help="cluster label shapes into anchors", formatter_class=fmt)
    p.add_argument("--data", required=True, help="directory of <id>.txt label files")
    p.add_argument("--k", type=_positive_int, default=5, help="number of anchors")
    p.add_argument("--seed", type=int, default=0, help="clustering seed")
    p.add_argument("--grid", type=_positive_int, default=13, help="grid size for anchor units")
    p.add_argument("--config", help="network config; overrides --grid with its grid size")
    p.add_argument("--out", required=True, help="anchor file to write")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", help="train a network", formatter_class=fmt)
    p.add_argument("--config", required=True, help="network config file")
    p.add_argument("--anchors", required=True, help="anchor file")
    p.add_argument("--data", help="dataset directory of <id>.ppm + <id>.txt")
    p.add_argument("--synthetic", type=_positive_int, default=0,
                   help="train on N in-memory synthetic images instead of --data")
    p.add_argument("--weights", help="output weights path (default <out>/weights.rsnw)")
    p.add_argument("--seed", type=int, default=0, help="init and batch-order seed")
    p.add_argument("--iters", type=_non_negative_int, default=1250, help="SGD iterations")
    p.add_argument("--lr", type=_positive_float, default=1e-3, help="learning rate")
    p.add_argument("--momentum", type=_momentum, default=0.9, help="SGD momentum")
    p.add_argument("--batch", type=_positive_int, default=4, help="batch size")
    p.add_argument("--init-gain", type=_positive_float, default=math.sqrt(6.0),
                   help="weight init bound is gain*sqrt(1/fan_in)")
    p.add_argument("--clip", type=float, default=10.0,
                   help="global gradient-norm clip (0 disables)")
    p.add_argument("--loss-weights", type=_loss_weights, default="5,1,0.5,1",
                   help="coord,obj,noobj,cls")
    p.add_argument("--ignore-iou", type=_unit_interval, default=0.5,
                   help="IoU above which unassigned slots are not penalized")
    p.add_argument("--objectness-target", choices=("one", "iou"), default="one",
                   help="regression target for assigned objectness")
    p.add_argument("--checkpoint-every", type=_non_negative_int, default=0,
                   help="save weights every N iterations (0 disables)")
    p.add_argument("--gmp-mode", choices=network.GMP_MODES, default=None,
                   help="override the config's gmp_mode ('none' is the identity ablation)")
    p.add_argument("--out", default="run", help="output directory for curves and weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection on PPM images", formatter_class=fmt)
    p.add_argument("images", nargs="*", help="PPM image paths")
    p.add_argument("--data", help="also process every .ppm in this directory")
    p.add_argument("--config", required=True, help="network config file")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--anchors", required=True, help="anchor file")
    p.add_argument("--conf", type=_unit_interval, default=0.25,
                   help="minimum objectness * class probability")
    p.add_argument("--nms", type=_unit_interval, default=0.45, help="NMS IoU threshold")
    p.add_argument("--gmp-mode", choices=network.GMP_MODES, default=None,
                   help="override the config's gmp_mode")
    p.add_argument("--out", default="detections.txt", help="detection file ('-' for stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against labels", formatter_class=fmt)
    p.add_argument("--data", required=True, help="ground-truth directory of <id>.txt (+ .ppm)")
    p.add_argument("--detections", required=True, help="detection file")
    p.add_argument("--image-size", type=_positive_int, nargs=2, metavar=("W", "H"),
                   help="image size when no <id>.ppm is present")
    p.add_argument("--names", help="comma-separated class names")
    p.add_argument("--iou", type=_unit_interval, default=0.5, help="true-positive IoU threshold")
    p.add_argument("--out", default="report", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="print mAPs of several eval reports side by side",
                       formatter_class=fmt)
    p.add_argument("reports", nargs="+", help="eval output directories")
    p.add_argument("--labels", nargs="+", required=True, help="one label per report")
    p.add_argument("--out", help="also write the comparison CSV here")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("RSNET_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"rsnet: RSNET_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=limit):
            args.func(args)
    except CommandError as exc:
        print(f"rsnet {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
