"""Image/label/weights I/O, letterboxing and the synthetic scene generator."""
from dataclasses import dataclass
import os
import struct

import numpy as np

from .errors import FormatError, SpecMismatchError, TruncatedError, WeightsError
from .head import GroundTruthBox
from .network import check_params
from .tensor import ConvParams

MAX_PPM_SIDE = 1 << 14


# -- PPM ------------------------------------------------------------------------

def _ppm_token(data, pos, path):
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncatedError("header ended early", path=path, offset=start)
    tok = data[start:pos]
    if not tok.isdigit():
        raise FormatError(f"expected a decimal number in header, got {tok[:16]!r}", path=path,
                          offset=start)
    return int(tok), pos, start


def decode_ppm(data, path=None):
    """Binary P6 bytes -> float32 tensor (1, 3, H, W) scaled to [0, 1]."""
    data = bytes(data)
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM (missing P6 magic)", path=path, offset=0)
    pos = 2
    if pos >= len(data) or not (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
        raise FormatError("expected whitespace after magic", path=path, offset=pos)
    width, pos, at = _ppm_token(data, pos, path)
    if not 0 < width <= MAX_PPM_SIDE:
        raise FormatError(f"width {width} out of range", path=path, offset=at)
    height, pos, at = _ppm_token(data, pos, path)
    if not 0 < height <= MAX_PPM_SIDE:
        raise FormatError(f"height {height} out of range", path=path, offset=at)
    maxval, pos, at = _ppm_token(data, pos, path)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", path=path, offset=at)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedError("missing whitespace before pixel data", path=path, offset=pos)
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise TruncatedError(f"pixel data truncated: need {need} bytes, have {len(data) - pos}",
                             path=path, offset=len(data))
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = pix.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
    return img[None]


def encode_ppm(image):
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    _, h, w = img.shape
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes()


def load_image_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), path=path)


def save_image_ppm(image, path):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def ppm_size(path):
    """(width, height) from a PPM header without decoding pixels."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head[:2] != b"P6":
        raise FormatError("not a binary PPM (missing P6 magic)", path=path, offset=0)
    w, pos, _ = _ppm_token(head, 2, path)
    h, _, _ = _ppm_token(head, pos, path)
    return w, h


# -- letterbox ------------------------------------------------------------------

@dataclass(frozen=True)
class Letterbox:
    """Affine map from source pixels to the square canvas: ``x' = x * sx + dx``."""

    src_w: int
    src_h: int
    size: int
    sx: float
    sy: float
    dx: float
    dy: float

    def to_canvas(self, box):
        x0, y0, x1, y1 = box
        return (x0 * self.sx + self.dx, y0 * self.sy + self.dy,
                x1 * self.sx + self.dx, y1 * self.sy + self.dy)

    def to_source(self, box):
        x0, y0, x1, y1 = box
        return ((x0 - self.dx) / self.sx, (y0 - self.dy) / self.sy,
                (x1 - self.dx) / self.sx, (y1 - self.dy) / self.sy)

    def label_to_canvas(self, gt):
        """Normalized source label -> normalized canvas label."""
        cx = (gt.cx * self.src_w * self.sx + self.dx) / self.size
        cy = (gt.cy * self.src_h * self.sy + self.dy) / self.size
        w = gt.w * self.src_w * self.sx / self.size
        h = gt.h * self.src_h * self.sy / self.size
        return GroundTruthBox(gt.class_id, cx, cy, w, h)


def _resize_bilinear(img, out_h, out_w):
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def letterbox(image, size):
    """Aspect-preserving bilinear resize onto a size x size canvas padded with 0.5."""
    if size <= 0:
        raise ValueError(f"letterbox size must be positive, got {size}")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 4:
        img = img[0]
    _, h, w = img.shape
    scale = min(size / w, size / h)
    new_w = max(1, min(size, int(round(w * scale))))
    new_h = max(1, min(size, int(round(h * scale))))
    dx, dy = (size - new_w) // 2, (size - new_h) // 2
    canvas = np.full((3, size, size), 0.5, dtype=np.float32)
    canvas[:, dy:dy + new_h, dx:dx + new_w] = _resize_bilinear(img, new_h, new_w)
    rec = Letterbox(w, h, size, new_w / w, new_h / h, float(dx), float(dy))
    return canvas[None], rec


# -- labels ----------------------------------------------------------------------

def parse_labels(text, path=None):
    """``class_id cx cy w h`` lines (normalized) -> list of GroundTruthBox."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("label file is not valid UTF-8", path=path, offset=exc.start) from None
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 5:
            raise FormatError(f"expected 5 fields, got {len(tok)}", path=path, line=lineno)
        try:
            cls = int(tok[0])
            vals = [float(t) for t in tok[1:]]
        except ValueError:
            raise FormatError(f"non-numeric field in {line.strip()!r}", path=path,
                              line=lineno) from None
        try:
            boxes.append(GroundTruthBox(cls, *vals))
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from None
    return boxes


def format_labels(boxes):
    return "".join(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes)


def load_labels(path):
    with open(path, "rb") as fh:
        return parse_labels(fh.read(), path=path)


# -- datasets --------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    boxes: list
    id: str
    letterbox: Letterbox = None


SHAPES = ("rectangle", "cross", "frame")


def _background(rng, s):
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    base = rng.uniform(0.3, 0.6)
    fx, fy = rng.uniform(2, 6, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.06 * np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1])
    tint = rng.uniform(-0.05, 0.05, size=3)[:, None, None]
    noise = rng.normal(0.0, 0.03, size=(3, s, s))
    return base + texture[None] + tint + noise


def _mask(shape, w, h):
    m = np.zeros((h, w), bool)
    if shape == "rectangle":
        m[:] = True
    elif shape == "cross":
        tw, th = max(1, w // 3), max(1, h // 3)
        x0, y0 = (w - tw) // 2, (h - th) // 2
        m[:, x0:x0 + tw] = True
        m[y0:y0 + th, :] = True
    else:
        bw, bh = max(1, w // 5), max(1, h // 5)
        m[:] = True
        m[bh:h - bh, bw:w - bw] = False
    return m


def synth_dataset(n_images, size=64, classes=2, seed=0):
    """Deterministic toy scenes: 1-3 non-overlapping objects on textured ground.

    Class 0 is a filled rectangle, class 1 a plus-shaped cross, class 2 a
    hollow frame.  Object sides are 15-40% of ``size``.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if not 1 <= classes <= len(SHAPES):
        raise ValueError(f"classes must be in 1..{len(SHAPES)}, got {classes}")
    rng = np.random.default_rng(seed)
    lo, hi = int(np.ceil(0.15 * size)), int(np.floor(0.40 * size))
    samples = []
    for i in range(n_images):
        img = _background(rng, size)
        n_obj = int(rng.integers(1, 4))
        placed = []
        boxes = []
        for _ in range(n_obj):
            for _attempt in range(50):
                w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
                if all(x0 >= bx1 + 1 or bx0 >= x0 + w + 1 or y0 >= by1 + 1 or by0 >= y0 + h + 1
                       for bx0, by0, bx1, by1 in placed):
                    break
            else:
                continue
            cls = int(rng.integers(0, classes))
            color = rng.uniform(0.0, 1.0, size=3)
            # keep objects visibly apart from the mid-gray background
            color[int(rng.integers(0, 3))] = rng.choice([rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0)])
            m = _mask(SHAPES[cls], w, h)
            region = img[:, y0:y0 + h, x0:x0 + w]
            img[:, y0:y0 + h, x0:x0 + w] = np.where(m[None], color[:, None, None], region)
            placed.append((x0, y0, x0 + w, y0 + h))
            boxes.append(GroundTruthBox(cls, (x0 + w / 2) / size, (y0 + h / 2) / size,
                                        w / size, h / size))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
        rec = Letterbox(size, size, size, 1.0, 1.0, 0.0, 0.0)
        samples.append(Sample(img, boxes, f"synth_{i:04d}", rec))
    return samples


def write_dataset(samples, directory):
    """Write ``<id>.ppm`` + ``<id>.txt`` pairs.

    Images are quantized to 8 bits, so reloaded pixels differ from the
    in-memory floats by at most 1/510.
    """
    os.makedirs(directory, exist_ok=True)
    for s in samples:
        save_image_ppm(s.image, os.path.join(directory, f"{s.id}.ppm"))
        with open(os.path.join(directory, f"{s.id}.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_labels(s.boxes))


def list_images(directory):
    return sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".ppm"))


def load_dataset(directory, size):
    """Letterboxed samples for every ``<id>.ppm`` in ``directory``.

    A missing ``<id>.txt`` means the image has no objects.
    """
    samples = []
    for image_id in list_images(directory):
        img = load_image_ppm(os.path.join(directory, image_id + ".ppm"))
        canvas, rec = letterbox(img, size)
        label_path = os.path.join(directory, image_id + ".txt")
        boxes = load_labels(label_path) if os.path.exists(label_path) else []
        samples.append(Sample(canvas, [rec.label_to_canvas(b) for b in boxes], image_id, rec))
    return samples


# -- weights ---------------------------------------------------------------------

WEIGHTS_MAGIC = b"RSNW"
WEIGHTS_VERSION = 1


def encode_weights(spec, params):
    check_params(spec, params)
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(params))]
    for p in params:
        parts.append(struct.pack("<4I", *p.weight.shape))
        parts.append(np.ascontiguousarray(p.weight, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(data, spec=None, path=None):
    """Parse an RSNW payload; with ``spec`` the layer shapes are also checked."""
    data = bytes(data)
    if len(data) < 12:
        if data[:len(data)] != WEIGHTS_MAGIC[:len(data)]:
            raise WeightsError("bad magic", path=path, offset=0)
        raise TruncatedError("header truncated", path=path, offset=len(data))
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightsError(f"bad magic {data[:4]!r}", path=path, offset=0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported version {version}", path=path, offset=4)
    expected = spec.conv_shapes() if spec is not None else None
    if expected is not None and count != len(expected):
        raise SpecMismatchError(f"file has {count} layers, network expects {len(expected)}",
                                path=path, offset=8)
    pos = 12
    params = []
    for i in range(count):
        if len(data) - pos < 16:
            raise TruncatedError(f"layer {i} header truncated", path=path, offset=len(data))
        shape = struct.unpack_from("<4I", data, pos)
        if expected is not None and shape != expected[i][0]:
            raise SpecMismatchError(f"layer {i}: file shape {shape}, network expects "
                                    f"{expected[i][0]}", path=path, offset=pos)
        if shape[0] < 1 or shape[1] < 1 or shape[2] != shape[3] or shape[2] not in (1, 3):
            raise WeightsError(f"layer {i}: invalid conv shape {shape}", path=path, offset=pos)
        pos += 16
        n_w = shape[0] * shape[1] * shape[2] * shape[3]
        need = 4 * (n_w + shape[0])
        if len(data) - pos < need:
            raise TruncatedError(f"layer {i} data truncated", path=path, offset=len(data))
        w = np.frombuffer(data, "<f4", n_w, pos).reshape(shape).astype(np.float32)
        b = np.frombuffer(data, "<f4", shape[0], pos + 4 * n_w).astype(np.float32)
        pos += need
        stride = expected[i][1] if expected is not None else 1
        try:
            params.append(ConvParams(w, b, stride))
        except ValueError as exc:
            raise WeightsError(f"layer {i}: {exc}", path=path, offset=pos - need - 16) from None
    if pos != len(data):
        raise WeightsError(f"{len(data) - pos} trailing bytes", path=path, offset=pos)
    return params


def save_weights(spec, params, path):
    with open(path, "wb") as fh:
        fh.write(encode_weights(spec, params))


def load_weights(spec, path):
    with open(path, "rb") as fh:
        return decode_weights(fh.read(), spec, path=path)
