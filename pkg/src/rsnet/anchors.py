"""Anchor priors from k-means over box shapes with a 1 - IoU distance."""
import numpy as np

from .errors import FormatError
from .head import Anchor


def _as_shapes(samples):
    arr = np.asarray([(float(s[0]), float(s[1])) if not hasattr(s, "p_w") else (s.p_w, s.p_h)
                      for s in samples], dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError("box shapes must be positive and finite")
    return arr


def shape_iou(a, b):
    """IoU of two (w, h) shapes placed on a common center."""
    (aw, ah), (bw, bh) = a, b
    if min(aw, ah, bw, bh) <= 0:
        raise ValueError("shape sizes must be positive")
    inter = min(aw, bw) * min(ah, bh)
    return inter / (aw * ah + bw * bh - inter)


def _iou_matrix(samples, centroids):
    inter = (np.minimum(samples[:, None, 0], centroids[None, :, 0])
             * np.minimum(samples[:, None, 1], centroids[None, :, 1]))
    area_s = samples[:, 0] * samples[:, 1]
    area_c = centroids[:, 0] * centroids[:, 1]
    return inter / (area_s[:, None] + area_c[None, :] - inter)


def _farthest_point_init(shapes, k, rng):
    chosen = [int(rng.integers(len(shapes)))]
    nearest = 1.0 - _iou_matrix(shapes, shapes[chosen])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, 1.0 - _iou_matrix(shapes, shapes[[nxt]])[:, 0])
    return shapes[chosen].copy()


def kmeans_anchors(samples, k=5, seed=0, max_iter=300):
    """Cluster (w, h) shapes into ``k`` anchors, returned area-ascending.

    Deterministic for fixed inputs: seeded farthest-point initialization,
    mean centroid updates, nearest-centroid ties to the lowest index.  An empty
    cluster is reseeded with the sample farthest from its own centroid.
    """
    shapes = _as_shapes(samples)
    if len(shapes) == 0:
        raise ValueError("no box shapes to cluster")
    distinct = len(np.unique(shapes, axis=0))
    if not 1 <= k <= distinct:
        raise ValueError(f"k={k} must lie in 1..{distinct} (number of distinct shapes)")
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_init(shapes, k, rng)
    labels = None
    for _ in range(max_iter):
        dist = 1.0 - _iou_matrix(shapes, centroids)
        new_labels = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        own = dist[np.arange(len(shapes)), labels]
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = shapes[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centroids[c] = shapes[far]
                own[far] = -1.0
    order = np.lexsort((centroids[:, 0], centroids[:, 0] * centroids[:, 1]))
    return [Anchor(float(w), float(h)) for w, h in centroids[order]]


def avg_iou(samples, anchors):
    """Mean over samples of the best shape IoU with any anchor."""
    shapes = _as_shapes(samples)
    cents = _as_shapes(anchors)
    if len(shapes) == 0 or len(cents) == 0:
        raise ValueError("avg_iou needs non-empty samples and anchors")
    return float(_iou_matrix(shapes, cents).max(axis=1).mean())


def format_anchors(anchors):
    return "".join(f"{a.p_w:.6f} {a.p_h:.6f}\n" for a in anchors)


def save_anchors(anchors, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_anchors(anchors))


def parse_anchors(text, path=None):
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("anchor file is not valid UTF-8", path=path, offset=exc.start) from None
    anchors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 2:
            raise FormatError("expected '<p_w> <p_h>'", path=path, line=lineno)
        try:
            anchors.append(Anchor(float(tok[0]), float(tok[1])))
        except ValueError as exc:
            raise FormatError(f"bad anchor: {exc}", path=path, line=lineno) from None
    if not anchors:
        raise FormatError("anchor file holds no anchors", path=path)
    return anchors


def load_anchors(path):
    with open(path, "rb") as fh:
        return parse_anchors(fh.read(), path=path)
