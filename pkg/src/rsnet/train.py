"""Training loop and the detection pipeline built on the network and head."""
import logging
import math

import numpy as np

from . import head as H
from .errors import RSNetError
from .metrics import Detection, nms
from .network import backward, forward, forward_cached

log = logging.getLogger(__name__)


class NumericalError(RSNetError):
    def __init__(self, iteration, value):
        self.iteration = iteration
        super().__init__(f"loss became {value} at iteration {iteration}")


def train(spec, params, samples, anchors, iters, lr=1e-3, momentum=0.9, batch_size=4, seed=0,
          weights=H.LossWeights(), ignore_iou=0.5, objectness_target="one",
          checkpoint_every=0, on_checkpoint=None, clip_norm=None):
    """Momentum SGD on the per-image mean of the detection loss.

    Batches walk a seeded permutation of ``samples``, reshuffled every epoch.
    Returns ``(params, history)`` with history rows ``(iteration, loss)``.
    ``on_checkpoint(iteration, params)`` runs every ``checkpoint_every`` steps.
    ``clip_norm`` rescales the gradient whenever its global L2 norm exceeds it.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    anchors = H.as_anchors(anchors)
    if len(anchors) != spec.anchors_per_cell:
        raise ValueError(f"network expects {spec.anchors_per_cell} anchors, got {len(anchors)}")
    rng = np.random.default_rng(seed)
    batch_size = min(batch_size, len(samples))
    order = rng.permutation(len(samples))
    cursor = 0
    velocity = None
    history = []
    for it in range(1, iters + 1):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(samples))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        x = np.concatenate([samples[i].image for i in idx], axis=0)
        raw, cache = forward_cached(spec, params, x)
        _, targets = H.build_targets(raw, [samples[i].boxes for i in idx], anchors,
                                     spec.num_classes, ignore_iou, objectness_target)
        total, grad = H.loss(raw, targets, weights)
        value = total / len(idx)
        if not math.isfinite(value):
            raise NumericalError(it, value)
        grads = backward(spec, params, cache, grad / np.float32(len(idx)))
        if clip_norm:
            grads = clip_gradients(grads, clip_norm)
        params, velocity = H.sgd_step(params, grads, velocity, lr, momentum)
        history.append((it, value))
        if it == 1 or it % 100 == 0:
            log.info("iteration %d loss %.6f", it, value)
        if checkpoint_every and on_checkpoint is not None and it % checkpoint_every == 0:
            on_checkpoint(it, params)
    return params, history


def clip_gradients(grads, max_norm):
    sq = sum(float(np.sum(g.weight.astype(np.float64) ** 2) + np.sum(g.bias.astype(np.float64) ** 2))
             for g in grads)
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return grads
    scale = np.float32(max_norm / norm)
    return [H.ConvParams(g.weight * scale, g.bias * scale, g.stride, g.padding) for g in grads]


def dataset_loss(spec, params, samples, anchors, weights=H.LossWeights(), batch_size=16):
    """Per-image mean loss over ``samples`` without updating anything."""
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        raw = forward(spec, params, np.concatenate([s.image for s in chunk], axis=0))
        _, targets = H.build_targets(raw, [s.boxes for s in chunk], anchors, spec.num_classes)
        total += H.loss(raw, targets, weights)[0]
    return total / len(samples)


def raw_to_detections(raw, anchors, num_classes, input_size, letterboxes, image_ids,
                      conf_thresh=0.25, nms_thresh=0.45):
    """Decode, threshold ``objectness * class_prob``, map to source pixels, NMS.

    Every class whose score clears ``conf_thresh`` emits its own detection.
    """
    d = H.decode_arrays(raw, anchors, num_classes)
    grid = d["x"].shape[-1]
    stride = input_size / grid
    dets = []
    for b, (rec, image_id) in enumerate(zip(letterboxes, image_ids)):
        scores = d["obj"][b][:, None] * d["cls"][b]
        hits = np.argwhere(scores >= conf_thresh)
        for ai, k, cy, cx in hits:
            bx, by = d["x"][b, ai, cy, cx] * stride, d["y"][b, ai, cy, cx] * stride
            bw, bh = d["w"][b, ai, cy, cx] * stride, d["h"][b, ai, cy, cx] * stride
            x0, y0, x1, y1 = rec.to_source((bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2))
            x0, x1 = min(max(x0, 0.0), rec.src_w), min(max(x1, 0.0), rec.src_w)
            y0, y1 = min(max(y0, 0.0), rec.src_h), min(max(y1, 0.0), rec.src_h)
            if x0 < x1 and y0 < y1:
                conf = float(min(max(scores[ai, k, cy, cx], 0.0), 1.0))
                dets.append(Detection(image_id, int(k), conf, (x0, y0, x1, y1)))
    return nms(dets, nms_thresh) if dets else []


def detect(spec, params, anchors, samples, conf_thresh=0.25, nms_thresh=0.45, batch_size=8):
    """Run inference over letterboxed samples; returns detections in source pixels."""
    anchors = H.as_anchors(anchors)
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        raw = forward(spec, params, np.concatenate([s.image for s in chunk], axis=0))
        out.extend(raw_to_detections(raw, anchors, spec.num_classes, spec.input_size,
                                     [s.letterbox for s in chunk], [s.id for s in chunk],
                                     conf_thresh, nms_thresh))
    return out
