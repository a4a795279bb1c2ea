"""Backbone description, builders, config text format and forward/backward.

A network is a flat list of :class:`LayerSpec` rows followed by an implicit
1x1 linear head conv with ``anchors_per_cell * (5 + num_classes)`` filters.
Every backbone conv is followed by leaky ReLU (alpha 0.1).

The global max pooling rows can be realised three ways (``gmp_mode``):

``broadcast``
    ``out = x + broadcast(global_maxpool(x))``; spatial shape is kept.
``final``
    rows are identity; one global max pool runs after the last layer, so the
    head sees a 1x1 grid.
``none``
    rows are identity.  Ablation baseline only.
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError

CONV = "conv"
GMP_BLOCK = "gmp_block"
MAXPOOL = "maxpool"
LAYER_KINDS = (CONV, GMP_BLOCK, MAXPOOL)

GMP_MODES = ("broadcast", "final", "none")
LEAKY_ALPHA = 0.1

TABLE1_REPEATS = (1, 2, 8, 8, 4)
TABLE1_BASE = 32


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    repeat: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.repeat < 1:
            raise ValueError(f"repeat must be >= 1, got {self.repeat}")
        if self.kind == CONV:
            if self.filters < 1:
                raise ValueError(f"conv filters must be positive, got {self.filters}")
            if self.kernel not in (1, 3):
                raise ValueError(f"conv kernel must be 1 or 3, got {self.kernel}")
            if self.stride not in (1, 2):
                raise ValueError(f"conv stride must be 1 or 2, got {self.stride}")
        elif self.filters or self.kernel or self.stride != 1:
            raise ValueError(f"{self.kind} takes no filters/kernel/stride")


def conv(filters, kernel, stride=1):
    return LayerSpec(CONV, filters, kernel, stride)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    gmp_mode: str = "broadcast"
    input_size: int = 416
    num_classes: int = 1
    anchors_per_cell: int = 5
    in_channels: int = field(default=3)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.gmp_mode not in GMP_MODES:
            raise ValueError(f"gmp_mode must be one of {GMP_MODES}, got {self.gmp_mode!r}")
        if self.input_size < 1 or self.input_size % 2:
            raise ValueError(f"input_size must be a positive even integer, got {self.input_size}")
        if self.num_classes < 1 or self.anchors_per_cell < 1:
            raise ValueError("num_classes and anchors_per_cell must be positive")
        if not any(layer.kind == CONV for layer in self.layers):
            raise ValueError("network needs at least one conv layer")
        factor = self.downsample
        if self.input_size % factor:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by the downsample factor {factor}")

    def expanded(self):
        """Layers with ``repeat`` unrolled."""
        out = []
        for layer in self.layers:
            out.extend([replace(layer, repeat=1)] * layer.repeat)
        return out

    @property
    def head_filters(self):
        return self.anchors_per_cell * (5 + self.num_classes)

    @property
    def downsample(self):
        halvings = sum(1 for l in self.expanded()
                       if (l.kind == CONV and l.stride == 2) or l.kind == MAXPOOL)
        return 2 ** halvings

    @property
    def grid_size(self):
        if self.gmp_mode == "final":
            return 1
        return self.input_size // self.downsample

    @property
    def conv_count(self):
        """Backbone conv layers, head excluded."""
        return sum(1 for l in self.expanded() if l.kind == CONV)

    def conv_shapes(self):
        """(F, C_in, k, k) and stride for every conv including the head."""
        shapes = []
        c = self.in_channels
        for layer in self.expanded():
            if layer.kind == CONV:
                shapes.append(((layer.filters, c, layer.kernel, layer.kernel), layer.stride))
                c = layer.filters
        shapes.append(((self.head_filters, c, 1, 1), 1))
        return shapes


def _build(repeats, base, gmp_mode, input_size, num_classes, anchors_per_cell):
    layers = [conv(base, 3, 1)]
    for i, rep in enumerate(repeats, start=1):
        width = base * 2 ** i
        layers.append(conv(width, 3, 2))
        for _ in range(rep):
            layers.append(conv(width // 2, 1, 1))
            layers.append(conv(width, 3, 1))
        layers.append(LayerSpec(GMP_BLOCK))
    return NetworkSpec(tuple(layers), gmp_mode, input_size, num_classes, anchors_per_cell)


def build_table1(gmp_mode="broadcast", input_size=416, num_classes=1, anchors_per_cell=5):
    """Full backbone: 52 convs in five stride-2 stages, each closed by a GMP row."""
    if input_size % 32:
        raise ValueError(f"input_size must be divisible by 32, got {input_size}")
    return _build(TABLE1_REPEATS, TABLE1_BASE, gmp_mode, input_size, num_classes,
                  anchors_per_cell)


def build_tiny(stages=3, base_filters=8, input_size=64, num_classes=2, anchors_per_cell=2,
               gmp_mode="broadcast"):
    """Same layer grammar as :func:`build_table1`, one repeat per stage."""
    if not 2 <= stages <= 5:
        raise ValueError(f"stages must be in 2..5, got {stages}")
    if base_filters < 2 or base_filters % 2:
        raise ValueError(f"base_filters must be an even integer >= 2, got {base_filters}")
    if input_size % 2 ** stages:
        raise ValueError(f"input_size must be divisible by {2 ** stages}, got {input_size}")
    return _build((1,) * stages, base_filters, gmp_mode, input_size, num_classes,
                  anchors_per_cell)


def parameter_count(spec):
    return sum(f * c * k * k + f for (f, c, k, _), _ in spec.conv_shapes())


def layer_shapes(spec, batch=1):
    """Shape-only walk: list of ``(kind, out_shape)`` without allocating tensors."""
    n, c, h, w = batch, spec.in_channels, spec.input_size, spec.input_size
    out = []
    for layer in spec.expanded():
        if layer.kind == CONV:
            p = (layer.kernel - 1) // 2
            c = layer.filters
            h = T.conv_output_size(h, layer.kernel, layer.stride, p)
            w = T.conv_output_size(w, layer.kernel, layer.stride, p)
        elif layer.kind == MAXPOOL:
            h, w = (h + 1) // 2, (w + 1) // 2
        out.append((layer.kind, (n, c, h, w)))
    if spec.gmp_mode == "final":
        h = w = 1
        out.append(("final_gmp", (n, c, h, w)))
    out.append(("head", (n, spec.head_filters, h, w)))
    return out


def output_shape(spec, batch=1):
    return layer_shapes(spec, batch)[-1][1]


# -- parameters ---------------------------------------------------------------

def init_params(spec, seed=0, gain=1.0):
    """Uniform(-s, s) weights with s = gain * sqrt(1 / fan_in), zero biases.

    ``gain=1`` shrinks activations by roughly 0.4x per layer; deep stacks
    trained from scratch want ``gain=sqrt(6)`` (variance 2 / fan_in).
    """
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    rng = np.random.default_rng(seed)
    params = []
    for shape, stride in spec.conv_shapes():
        s = gain * math.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
        # shrink slightly so float32 rounding cannot land on the open bound
        w = rng.uniform(-s, s, size=shape) * (1.0 - 1e-6)
        params.append(T.ConvParams(w.astype(np.float32), np.zeros(shape[0], np.float32), stride))
    return params


def zero_params(spec, dtype=np.float32):
    return [T.ConvParams(np.zeros(shape, dtype), np.zeros(shape[0], dtype), stride)
            for shape, stride in spec.conv_shapes()]


def check_params(spec, params):
    expected = spec.conv_shapes()
    if len(params) != len(expected):
        raise DimensionError(f"expected {len(expected)} conv parameter sets, got {len(params)}")
    for i, (p, (shape, stride)) in enumerate(zip(params, expected)):
        if p.weight.shape != shape or p.stride != stride:
            raise DimensionError(
                f"layer {i}: expected weight {shape} stride {stride}, "
                f"got {p.weight.shape} stride {p.stride}")


# -- forward / backward -------------------------------------------------------

def forward_cached(spec, params, batch):
    """Run the network and keep what :func:`backward` needs."""
    check_params(spec, params)
    x = T.as_tensor(batch)
    want = (spec.in_channels, spec.input_size, spec.input_size)
    for axis, e, got in zip(("C", "H", "W"), want, x.shape[1:]):
        if e != got:
            raise DimensionError("input batch does not match network", axis=axis,
                                 expected=e, got=got)
    cache = []
    it = iter(params)
    for layer in spec.expanded():
        if layer.kind == CONV:
            p = next(it)
            z = T.conv2d(x, p)
            cache.append((CONV, x, z, p))
            x = T.leaky_relu(z, LEAKY_ALPHA)
        elif layer.kind == MAXPOOL:
            cache.append((MAXPOOL, x))
            x = T.maxpool2d(x)
        elif spec.gmp_mode == "broadcast":
            ctx = T.global_maxpool(x)
            cache.append((GMP_BLOCK, x, ctx))
            x = T.broadcast_add_channelwise(x, ctx)
    if spec.gmp_mode == "final":
        cache.append(("final_gmp", x))
        x = T.global_maxpool(x)
    head = next(it)
    cache.append(("head", x, head))
    return T.conv2d(x, head), cache


def forward(spec, params, batch):
    """Raw head output of shape (N, A*(5+K), G, G)."""
    return forward_cached(spec, params, batch)[0]


def backward(spec, params, cache, head_grad):
    """Parameter gradients (list of ConvParams) from a forward cache."""
    grads = [None] * len(params)
    pi = len(params) - 1
    g = head_grad
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "head" or kind == CONV:
            if kind == "head":
                _, x, p = entry
            else:
                _, x, z, p = entry
                g = T.leaky_relu_backward(z, g, LEAKY_ALPHA)
            g, gw, gb = T.conv2d_backward(x, p, g)
            grads[pi] = T.ConvParams(gw, gb, p.stride, p.padding)
            pi -= 1
        elif kind == MAXPOOL:
            g = T.maxpool2d_backward(entry[1], g)
        elif kind == GMP_BLOCK:
            _, x, ctx = entry
            g_feat, g_ctx = T.broadcast_add_channelwise_backward(x, ctx, g)
            g = g_feat + T.global_maxpool_backward(x, g_ctx)
        elif kind == "final_gmp":
            g = T.global_maxpool_backward(entry[1], g)
    return grads


def forward_backward(spec, params, batch, head_grad):
    out, cache = forward_cached(spec, params, batch)
    g = np.asarray(head_grad)
    if g.shape != out.shape:
        raise DimensionError(f"head_grad shape {g.shape} does not match output {out.shape}")
    return backward(spec, params, cache, g)


# -- config text format --------------------------------------------------------

def format_config(spec):
    lines = [
        "# rsnet network",
        f"input {spec.input_size}",
        f"classes {spec.num_classes}",
        f"anchors_per_cell {spec.anchors_per_cell}",
        f"gmp_mode {spec.gmp_mode}",
    ]
    for layer in spec.layers:
        if layer.kind == CONV:
            row = f"conv {layer.filters} {layer.kernel} {layer.stride}"
        else:
            row = layer.kind
        lines.extend([row] * layer.repeat)
    return "\n".join(lines) + "\n"


def _int_token(tok, lineno, path, what):
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"{what} must be an integer, got {tok!r}", path=path, line=lineno) from None


def parse_config(text, path=None):
    """Parse the line-oriented network config into a :class:`NetworkSpec`."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("config is not valid UTF-8", path=path, offset=exc.start) from None
    header = {}
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0]
        try:
            if key in ("input", "classes", "anchors_per_cell", "gmp_mode"):
                if len(tok) != 2:
                    raise FormatError(f"{key} takes exactly one value", path=path, line=lineno)
                if key in header:
                    raise FormatError(f"duplicate {key} line", path=path, line=lineno)
                if key == "gmp_mode":
                    if tok[1] not in GMP_MODES:
                        raise FormatError(f"gmp_mode must be one of {GMP_MODES}", path=path,
                                          line=lineno)
                    header[key] = tok[1]
                else:
                    header[key] = _int_token(tok[1], lineno, path, key)
            elif key == CONV:
                if len(tok) != 4:
                    raise FormatError("conv needs <filters> <kernel> <stride>", path=path,
                                      line=lineno)
                f, k, s = (_int_token(t, lineno, path, "conv field") for t in tok[1:])
                layers.append(conv(f, k, s))
            elif key in (GMP_BLOCK, MAXPOOL):
                if len(tok) != 1:
                    raise FormatError(f"{key} takes no arguments", path=path, line=lineno)
                layers.append(LayerSpec(key))
            else:
                raise FormatError(f"unknown directive {key!r}", path=path, line=lineno)
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(str(exc), path=path, line=lineno) from None
    for key in ("input", "classes", "anchors_per_cell"):
        if key not in header:
            raise FormatError(f"missing {key} line", path=path)
    try:
        return NetworkSpec(tuple(layers), header.get("gmp_mode", "broadcast"), header["input"],
                           header["classes"], header["anchors_per_cell"])
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None


def load_config(path):
    with open(path, "rb") as fh:
        return parse_config(fh.read(), path=path)


def save_config(spec, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_config(spec))
