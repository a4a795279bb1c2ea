"""Detection metrics: IoU, NMS, greedy matching, AP50, mAP and log-average miss rate.

Ordering is total everywhere: confidence descending, then ``image_id``
lexicographic, then input position.  Boxes are ``(x_min, y_min, x_max, y_max)``
in pixels.
"""
from collections import defaultdict
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import FormatError

LAMR_FPPI = np.logspace(-2.0, 0.0, 9)
MISS_FLOOR = 1e-6


def _check_box(box):
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {box}")
    return x0, y0, x1, y1


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    confidence: float
    box: tuple

    def __post_init__(self):
        object.__setattr__(self, "box", _check_box(self.box))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class Truth:
    """A labeled box in pixel coordinates."""

    image_id: str
    class_id: int
    box: tuple

    def __post_init__(self):
        object.__setattr__(self, "box", _check_box(self.box))


def iou(a, b):
    ax0, ay0, ax1, ay1 = _check_box(a)
    bx0, by0, bx1, by1 = _check_box(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def iou_matrix(a, b):
    """Pairwise IoU between (n, 4) and (m, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def rank_order(dets):
    """Indices of ``dets`` in rank order (confidence desc, image_id, input order)."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].image_id, i))


def nms(dets, iou_thresh=0.45):
    """Greedy per-(image, class) suppression; kept boxes come back in rank order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    dets = list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    groups = defaultdict(list)
    for i in order:
        groups[(dets[i].image_id, dets[i].class_id)].append(i)
    keep = set()
    for idx in groups.values():
        boxes = np.array([dets[i].box for i in idx])
        ious = iou_matrix(boxes, boxes)
        kept = []
        for j in range(len(idx)):
            if not kept or np.all(ious[j, kept] < iou_thresh):
                kept.append(j)
        keep.update(idx[j] for j in kept)
    return [dets[i] for i in order if i in keep]


@dataclass
class ClassMatch:
    """Rank-ordered match outcome for one class."""

    n_gt: int
    tp: list = field(default_factory=list)
    confidences: list = field(default_factory=list)
    pr: list = field(default_factory=list)


def match_detections(dets, gts, iou_thresh=0.5):
    """Greedy AP50-style matching.

    Each detection, in rank order, claims the unmatched same-class gt of its
    image with the highest IoU (lowest index on ties) if that IoU reaches
    ``iou_thresh``; otherwise it is a false positive.
    Returns ``{class_id: ClassMatch}`` over every class seen in either input.
    """
    dets = list(dets)
    truth = defaultdict(list)
    n_gt = defaultdict(int)
    for g in gts:
        truth[(g.image_id, g.class_id)].append(g.box)
        n_gt[g.class_id] += 1
    truth_arr = {key: np.array(boxes) for key, boxes in truth.items()}
    matched = {key: np.zeros(len(boxes), bool) for key, boxes in truth.items()}
    classes = sorted(set(n_gt) | {d.class_id for d in dets})
    out = {c: ClassMatch(n_gt[c]) for c in classes}
    for i in rank_order(dets):
        d = dets[i]
        key = (d.image_id, d.class_id)
        hit = False
        if key in truth_arr:
            ious = iou_matrix([d.box], truth_arr[key])[0]
            ious[matched[key]] = -1.0
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh:
                matched[key][j] = True
                hit = True
        cm = out[d.class_id]
        cm.tp.append(hit)
        cm.confidences.append(d.confidence)
    for cm in out.values():
        cm.pr = pr_points(cm.tp, cm.n_gt)
    return out


def pr_points(tp_flags, n_gt):
    """Cumulative (recall, precision) after each ranked detection."""
    points = []
    tp = 0
    for k, hit in enumerate(tp_flags, start=1):
        tp += bool(hit)
        recall = tp / n_gt if n_gt else 0.0
        points.append((recall, tp / k))
    return points


def match_and_pr(dets, gts, iou_thresh=0.5):
    """``{class_id: (pr_points, tp_flags)}``."""
    return {c: (m.pr, m.tp) for c, m in match_detections(dets, gts, iou_thresh).items()}


def average_precision(pr):
    """All-point interpolated AP: area under the right-monotone precision envelope."""
    if not pr:
        return 0.0
    rec = np.concatenate([[0.0], [r for r, _ in pr], [1.0]])
    prec = np.concatenate([[0.0], [p for _, p in pr], [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def miss_rate_curve(tp_flags, n_gt, num_images):
    """(fppi, miss_rate) after 0, 1, ... ranked detections."""
    fppi, miss = [0.0], [1.0]
    tp = fp = 0
    for hit in tp_flags:
        if hit:
            tp += 1
        else:
            fp += 1
        fppi.append(fp / num_images)
        miss.append(1.0 - tp / n_gt)
    return np.array(fppi), np.array(miss)


def lamr_from_flags(tp_flags, n_gt, num_images):
    fppi, miss = miss_rate_curve(tp_flags, n_gt, num_images)
    samples = []
    for ref in LAMR_FPPI:
        ok = fppi <= ref
        samples.append(miss[ok].min() if ok.any() else 1.0)
    return float(math.exp(np.mean(np.log(np.maximum(samples, MISS_FLOOR)))))


def log_average_miss_rate(dets, gts, num_images, iou_thresh=0.5):
    """Per-class LAMR over 9 log-spaced FPPI points in [1e-2, 1]; classes without gts skipped."""
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    matches = match_detections(dets, gts, iou_thresh)
    return {c: lamr_from_flags(m.tp, m.n_gt, num_images)
            for c, m in matches.items() if m.n_gt > 0}


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    lamr: dict
    pr_curves: dict
    gt_counts: dict
    det_counts: dict
    tp_counts: dict
    classes: list = field(default_factory=list)


def build_report(dets, gts, classes=None, num_images=None, iou_thresh=0.5):
    """Assemble AP, mAP, LAMR, PR curves and per-class counts.

    ``classes`` lists class ids to report (default: every id seen).  mAP
    averages only classes with at least one ground truth.
    """
    dets, gts = list(dets), list(gts)
    if num_images is None:
        num_images = max(1, len({d.image_id for d in dets} | {g.image_id for g in gts}))
    matches = match_detections(dets, gts, iou_thresh)
    if classes is None:
        classes = sorted(matches)
    classes = list(classes)
    per_ap, lamr, curves = {}, {}, {}
    gt_counts, det_counts, tp_counts = {}, {}, {}
    for c in classes:
        m = matches.get(c, ClassMatch(0))
        gt_counts[c] = m.n_gt
        det_counts[c] = len(m.tp)
        tp_counts[c] = int(sum(m.tp))
        curves[c] = list(m.pr)
        if m.n_gt > 0:
            per_ap[c] = average_precision(m.pr)
            lamr[c] = lamr_from_flags(m.tp, m.n_gt, num_images)
    mean_ap = float(np.mean(list(per_ap.values()))) if per_ap else 0.0
    return EvalReport(per_ap, mean_ap, lamr, curves, gt_counts, det_counts, tp_counts, classes)


# -- detection file -------------------------------------------------------------

def sort_detections(dets):
    return sorted(dets, key=lambda d: (d.image_id, d.class_id, -d.confidence, d.box))


def format_detections(dets):
    rows = []
    for d in sort_detections(dets):
        x0, y0, x1, y1 = d.box
        rows.append(f"{d.image_id} {d.class_id} {d.confidence:.6f} "
                    f"{x0:.3f} {y0:.3f} {x1:.3f} {y1:.3f}\n")
    return "".join(rows)


def parse_detections(text, path=None):
    """Parse ``image_id class_id confidence x_min y_min x_max y_max`` lines."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("detection file is not valid UTF-8", path=path,
                              offset=exc.start) from None
    dets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 7:
            raise FormatError(f"expected 7 fields, got {len(tok)}", path=path, line=lineno)
        try:
            cls = int(tok[1])
            vals = [float(t) for t in tok[2:]]
            if not all(math.isfinite(v) for v in vals):
                raise ValueError("non-finite value")
            dets.append(Detection(tok[0], cls, vals[0], tuple(vals[1:])))
        except ValueError as exc:
            raise FormatError(f"bad detection: {exc}", path=path, line=lineno) from None
    return dets
