"""Detection head: box decoding/encoding, target assignment, loss and SGD.

Each anchor slot of the raw head tensor holds channels
``[t_x, t_y, t_w, t_h, t_o, class_logit_0 .. class_logit_{K-1}]``.
Box coordinates are in grid-cell units; ground truth is normalized to [0, 1].
"""
from dataclasses import dataclass
import math

import numpy as np

from .errors import DimensionError
from .tensor import ConvParams, sigmoid

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class Anchor:
    p_w: float
    p_h: float

    def __post_init__(self):
        if not (self.p_w > 0 and self.p_h > 0) or not math.isfinite(self.p_w * self.p_h):
            raise ValueError(f"anchor sizes must be positive and finite, got {self.p_w}, {self.p_h}")


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center must lie in [0, 1], got ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size must lie in (0, 1], got ({self.w}, {self.h})")


@dataclass(frozen=True)
class DecodedBox:
    b_x: float
    b_y: float
    b_w: float
    b_h: float
    objectness: float
    class_probs: tuple
    cell: tuple
    anchor_index: int
    batch_index: int = 0


def as_anchors(anchors):
    out = []
    for a in anchors:
        out.append(a if isinstance(a, Anchor) else Anchor(float(a[0]), float(a[1])))
    if not out:
        raise ValueError("at least one anchor is required")
    return out


def _split_raw(raw, num_anchors, num_classes):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4:
        raise DimensionError(f"head output must be rank 4, got rank {raw.ndim}")
    n, ch, gh, gw = raw.shape
    want = num_anchors * (5 + num_classes)
    if ch != want:
        raise DimensionError("head channel count", axis="C", expected=want, got=ch)
    return raw.reshape(n, num_anchors, 5 + num_classes, gh, gw)


def decode_arrays(raw, anchors, num_classes):
    """Vectorized decode.

    Returns a dict of float64 arrays: ``x, y, w, h, obj`` shaped (N, A, G, G)
    and ``cls`` shaped (N, A, K, G, G).
    """
    anchors = as_anchors(anchors)
    r = _split_raw(raw, len(anchors), num_classes)
    n, a, _, gh, gw = r.shape
    cy, cx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    pw = np.array([an.p_w for an in anchors])[None, :, None, None]
    ph = np.array([an.p_h for an in anchors])[None, :, None, None]
    return {
        "x": sigmoid(r[:, :, 0]) + cx,
        "y": sigmoid(r[:, :, 1]) + cy,
        "w": pw * np.exp(r[:, :, 2]),
        "h": ph * np.exp(r[:, :, 3]),
        "obj": sigmoid(r[:, :, 4]),
        "cls": sigmoid(r[:, :, 5:]),
    }


def decode(raw, anchors, num_classes):
    """Decode every (batch, cell, anchor) slot into a :class:`DecodedBox`."""
    d = decode_arrays(raw, anchors, num_classes)
    n, a, gh, gw = d["x"].shape
    boxes = []
    for b in range(n):
        for ai in range(a):
            for cy in range(gh):
                for cx in range(gw):
                    boxes.append(DecodedBox(
                        float(d["x"][b, ai, cy, cx]), float(d["y"][b, ai, cy, cx]),
                        float(d["w"][b, ai, cy, cx]), float(d["h"][b, ai, cy, cx]),
                        float(d["obj"][b, ai, cy, cx]),
                        tuple(float(v) for v in d["cls"][b, ai, :, cy, cx]),
                        (cx, cy), ai, b))
    return boxes


def cell_of(gt, grid):
    """Integer (c_x, c_y) of the cell holding the box center."""
    return (min(int(math.floor(gt.cx * grid)), grid - 1),
            min(int(math.floor(gt.cy * grid)), grid - 1))


def _in_cell(g, c, grid):
    # the far image edge belongs to the last cell
    return c <= g < c + 1 or (c == grid - 1 and g == grid)


def encode(gt, anchor, cell, grid):
    """Regression targets ``(sigma(t_x)*, sigma(t_y)*, t_w*, t_h*)`` for one slot."""
    anchor = as_anchors([anchor])[0]
    gx, gy = gt.cx * grid, gt.cy * grid
    c_x, c_y = cell
    if not (_in_cell(gx, c_x, grid) and _in_cell(gy, c_y, grid)):
        raise ValueError(f"box center ({gx:.4f}, {gy:.4f}) is outside cell {cell}")
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError("box size must be positive")
    return (gx - c_x, gy - c_y,
            math.log(grid * gt.w / anchor.p_w), math.log(grid * gt.h / anchor.p_h))


def shape_iou_wh(w1, h1, w2, h2):
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def box_iou_cxcywh(a, b):
    """IoU between center-format boxes; broadcasts over leading axes."""
    ax0, ax1 = a[..., 0] - a[..., 2] / 2, a[..., 0] + a[..., 2] / 2
    ay0, ay1 = a[..., 1] - a[..., 3] / 2, a[..., 1] + a[..., 3] / 2
    bx0, bx1 = b[..., 0] - b[..., 2] / 2, b[..., 0] + b[..., 2] / 2
    by0, by1 = b[..., 1] - b[..., 3] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class Assignment:
    """Per-slot state for one image, indexed ``[anchor, c_y, c_x]``.

    Values >= 0 are ground-truth indices; otherwise NEGATIVE or IGNORE.
    ``dropped`` lists gts that found no free slot in their cell.
    """

    state: np.ndarray
    dropped: tuple = ()

    def positives(self):
        a, cy, cx = np.nonzero(self.state >= 0)
        return [(int(i), int(y), int(x), int(self.state[i, y, x])) for i, y, x in zip(a, cy, cx)]


def assign_targets(gts, anchors, grid, ignore_iou=0.5, pred_boxes=None):
    """Give every gt one (cell, anchor) slot; mark overlapping leftovers IGNORE.

    The slot is the cell holding the gt center and the anchor with the best
    co-centered shape IoU (lowest index on ties).  If that slot is taken by an
    earlier gt the next-best free anchor in the cell is used.

    ``pred_boxes``, if given, is (A, G, G, 4) of decoded (x, y, w, h) in grid
    units; unassigned slots whose best IoU with any gt exceeds ``ignore_iou``
    become IGNORE.
    """
    anchors = as_anchors(anchors)
    state = np.full((len(anchors), grid, grid), NEGATIVE, dtype=np.int64)
    pw = np.array([a.p_w for a in anchors])
    ph = np.array([a.p_h for a in anchors])
    dropped = []
    for gi, gt in enumerate(gts):
        c_x, c_y = cell_of(gt, grid)
        ious = shape_iou_wh(gt.w * grid, gt.h * grid, pw, ph)
        order = sorted(range(len(anchors)), key=lambda i: (-ious[i], i))
        for ai in order:
            if state[ai, c_y, c_x] == NEGATIVE:
                state[ai, c_y, c_x] = gi
                break
        else:
            dropped.append(gi)
    if pred_boxes is not None and len(gts):
        pred = np.asarray(pred_boxes, dtype=np.float64)
        gt_arr = np.array([[g.cx * grid, g.cy * grid, g.w * grid, g.h * grid] for g in gts])
        best = box_iou_cxcywh(pred[:, :, :, None, :], gt_arr[None, None, None]).max(axis=-1)
        state[(state == NEGATIVE) & (best > ignore_iou)] = IGNORE
    return Assignment(state, tuple(dropped))


@dataclass
class Targets:
    """Dense training targets for a batch, shapes keyed on (N, A, ..., G, G)."""

    positive: np.ndarray
    negative: np.ndarray
    coord: np.ndarray
    objectness: np.ndarray
    classes: np.ndarray


def build_targets(raw, batch_gts, anchors, num_classes, ignore_iou=0.5, objectness_target="one"):
    """Assign every image of the batch and pack dense targets.

    ``objectness_target`` is ``"one"`` (positives regress to 1) or ``"iou"``
    (positives regress to the IoU between their current decoded box and the
    assigned gt, held constant for the gradient).
    """
    if objectness_target not in ("one", "iou"):
        raise ValueError(f"objectness_target must be 'one' or 'iou', got {objectness_target!r}")
    anchors = as_anchors(anchors)
    d = decode_arrays(raw, anchors, num_classes)
    n, a, g, _ = d["x"].shape
    pred = np.stack([d["x"], d["y"], d["w"], d["h"]], axis=-1)
    positive = np.zeros((n, a, g, g), bool)
    negative = np.zeros((n, a, g, g), bool)
    coord = np.zeros((n, a, 4, g, g))
    obj = np.zeros((n, a, g, g))
    cls = np.zeros((n, a, num_classes, g, g))
    assignments = []
    for b, gts in enumerate(batch_gts):
        asg = assign_targets(gts, anchors, g, ignore_iou, pred[b])
        assignments.append(asg)
        negative[b] = asg.state == NEGATIVE
        for ai, cy, cx, gi in asg.positives():
            gt = gts[gi]
            if gt.class_id >= num_classes:
                raise ValueError(f"class_id {gt.class_id} out of range for {num_classes} classes")
            positive[b, ai, cy, cx] = True
            coord[b, ai, :, cy, cx] = encode(gt, anchors[ai], (cx, cy), g)
            cls[b, ai, gt.class_id, cy, cx] = 1.0
            if objectness_target == "iou":
                box = np.array([gt.cx * g, gt.cy * g, gt.w * g, gt.h * g])
                obj[b, ai, cy, cx] = float(box_iou_cxcywh(pred[b, ai, cy, cx], box))
            else:
                obj[b, ai, cy, cx] = 1.0
    return assignments, Targets(positive, negative, coord, obj, cls)


@dataclass(frozen=True)
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0


def bce_logits(logit, target):
    """Binary cross-entropy of sigmoid(logit) against target, computed stably."""
    logit = np.asarray(logit, dtype=np.float64)
    return np.logaddexp(0.0, logit) - target * logit


def loss(raw, targets, weights=LossWeights()):
    """Summed detection loss and its exact gradient w.r.t. ``raw``."""
    r = _split_raw(raw, targets.positive.shape[1], targets.classes.shape[2])
    pos = targets.positive[:, :, None].astype(np.float64)
    pos1 = targets.positive.astype(np.float64)
    neg = targets.negative.astype(np.float64)
    grad = np.zeros_like(r)

    sxy = sigmoid(r[:, :, 0:2])
    dxy = sxy - targets.coord[:, :, 0:2]
    dwh = r[:, :, 2:4] - targets.coord[:, :, 2:4]
    coord_loss = np.sum(pos * dxy ** 2) + np.sum(pos * dwh ** 2)
    grad[:, :, 0:2] = weights.coord * pos * 2.0 * dxy * sxy * (1.0 - sxy)
    grad[:, :, 2:4] = weights.coord * pos * 2.0 * dwh

    t_o = r[:, :, 4]
    s_o = sigmoid(t_o)
    obj_loss = np.sum(pos1 * bce_logits(t_o, targets.objectness))
    noobj_loss = np.sum(neg * bce_logits(t_o, 0.0))
    grad[:, :, 4] = (weights.obj * pos1 * (s_o - targets.objectness)
                     + weights.noobj * neg * s_o)

    logits = r[:, :, 5:]
    cls_loss = np.sum(pos * bce_logits(logits, targets.classes))
    grad[:, :, 5:] = weights.cls * pos * (sigmoid(logits) - targets.classes)

    total = (weights.coord * coord_loss + weights.obj * obj_loss
             + weights.noobj * noobj_loss + weights.cls * cls_loss)
    raw_arr = np.asarray(raw)
    out_dtype = np.float64 if raw_arr.dtype == np.float64 else np.float32
    return float(total), grad.reshape(raw_arr.shape).astype(out_dtype)


def sgd_step(params, grads, velocity=None, lr=1e-3, momentum=0.9):
    """One momentum SGD step: ``v = momentum*v - lr*g; p = p + v``.

    ``params``/``grads``/``velocity`` are lists of ConvParams (velocity may be
    None for a zero start).  Returns ``(new_params, new_velocity)``.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if velocity is None:
        velocity = [ConvParams(np.zeros_like(p.weight), np.zeros_like(p.bias), p.stride, p.padding)
                    for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        dt = p.weight.dtype
        vw = (momentum * v.weight - lr * g.weight).astype(dt)
        vb = (momentum * v.bias - lr * g.bias).astype(p.bias.dtype)
        new_v.append(ConvParams(vw, vb, p.stride, p.padding))
        new_p.append(ConvParams((p.weight + vw).astype(dt), (p.bias + vb).astype(p.bias.dtype),
                                p.stride, p.padding))
    return new_p, new_v
