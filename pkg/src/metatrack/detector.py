"""Single-stage instance detectors: a small conv trunk, a classification head and
a regression head, in anchor-based and anchor-free flavours.

Images enter as [3, S, S] (or [N, 3, S, S] for a batch); internally feature
maps use the channel-major batch layout [C, N, H, W] understood by
:func:`metatrack.autodiff.conv2d`.
"""

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import io as tio
from .boxes import BoundingBox, iou_matrix

ANCHOR_BASED = "anchor-based"
ANCHOR_FREE = "anchor-free"

LOGIT_CAP = 20.0
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
SMOOTH_L1_BETA = 1.0 / 9.0
MIN_EXTENT = 2.0
CENTERNESS_PRIOR = -2.0  # initial anchor-free logit

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class DetectorConfig:
    head_style: str = ANCHOR_FREE
    input_size: int = 96
    stride: int = 8
    anchor_size: float = 32.0
    trunk_channels: tuple = (16, 32, 32, 64)
    shared_trunk: bool = False
    frozen_prefix_layers: int = 2
    head_convs: int = 2
    reg_weight: float = 1.0
    balanced_centerness: bool = True
    precision: str = "single"

    def __post_init__(self):
        if self.head_style not in (ANCHOR_BASED, ANCHOR_FREE):
            raise ValueError(f"head_style must be {ANCHOR_BASED!r} or {ANCHOR_FREE!r}, got {self.head_style!r}")
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.input_size % self.stride:
            raise ValueError(f"input_size {self.input_size} is not divisible by stride {self.stride}")
        if self.head_style == ANCHOR_BASED and not self.anchor_size > 0:
            raise ValueError("anchor_size must be positive for anchor-based heads")
        if len(self.trunk_channels) < self.n_downsample:
            raise ValueError(f"stride {self.stride} needs at least {self.n_downsample} trunk layers")
        if not 0 <= self.frozen_prefix_layers <= len(self.trunk_channels):
            raise ValueError("frozen_prefix_layers exceeds the trunk depth")
        if self.head_convs < 1:
            raise ValueError("head_convs must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @property
    def n_downsample(self):
        return int(math.log2(self.stride))

    @property
    def grid_size(self):
        return self.input_size // self.stride

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def cell_centers(self):
        """Pixel centers of the output grid, as (xs, ys) arrays of shape [G, G]."""
        idx = (np.arange(self.grid_size) + 0.5) * self.stride
        return np.meshgrid(idx, idx)

    def to_items(self):
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out.append((f.name.replace("_", "-"), str(value)))
        return out

    @classmethod
    def from_items(cls, items):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, text in items:
            name = key.replace("-", "_")
            if name not in types:
                raise KeyError(f"unknown detector config key {key!r}")
            kwargs[name] = parse_value(types[name], text)
        return cls(**kwargs)


def parse_value(kind, text):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "tuple":
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(int(p) if p.strip().lstrip("-").isdigit() else float(p) for p in parts)
    return text


@dataclass
class Param:
    weight: np.ndarray
    trainable: bool
    lr: np.ndarray = None


@dataclass
class ParamSet:
    """Detector weights plus kernel-wise inner-loop learning rates.

    A conv weight [C_out, C_in, kh, kw] carries one rate per output kernel
    (lr shape [C_out]); a bias carries one rate per element.
    """

    config: DetectorConfig
    entries: "OrderedDict[str, Param]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        for name, p in self.entries.items():
            if p.trainable and p.lr is None:
                raise ValueError(f"trainable entry {name!r} has no learning-rate tensor")
            if not p.trainable and p.lr is not None:
                raise ValueError(f"frozen entry {name!r} must not carry a learning rate")
            if p.lr is not None and p.lr.shape != lr_shape(p.weight.shape):
                raise ValueError(f"entry {name!r}: lr shape {p.lr.shape} does not match weight {p.weight.shape}")

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def trainable_names(self):
        return [n for n, p in self.entries.items() if p.trainable]

    def frozen_names(self):
        return [n for n, p in self.entries.items() if not p.trainable]

    def weights(self):
        return OrderedDict((n, p.weight) for n, p in self.entries.items())

    def lrs(self):
        return OrderedDict((n, p.lr) for n, p in self.entries.items() if p.trainable)

    def count(self, trainable_only=False):
        return sum(p.weight.size for p in self.entries.values() if p.trainable or not trainable_only)

    def copy(self):
        return ParamSet(self.config, OrderedDict(
            (n, Param(p.weight.copy(), p.trainable, None if p.lr is None else p.lr.copy()))
            for n, p in self.entries.items()))

    def replace(self, weights=None, lrs=None):
        """New ParamSet with some weights and/or learning rates swapped."""
        weights = weights or {}
        lrs = lrs or {}
        entries = OrderedDict()
        for n, p in self.entries.items():
            w = np.asarray(weights[n], dtype=p.weight.dtype) if n in weights else p.weight
            lr = np.asarray(lrs[n], dtype=p.weight.dtype) if n in lrs else p.lr
            if n in weights and w.shape != p.weight.shape:
                raise ValueError(f"entry {n!r}: new weight shape {w.shape} != {p.weight.shape}")
            entries[n] = Param(w, p.trainable, lr)
        return ParamSet(self.config, entries)

    def with_constant_lr(self, value):
        return self.replace(lrs={n: np.full_like(p.lr, value) for n, p in self.entries.items() if p.trainable})

    def astype(self, dtype):
        return ParamSet(self.config, OrderedDict(
            (n, Param(p.weight.astype(dtype), p.trainable, None if p.lr is None else p.lr.astype(dtype)))
            for n, p in self.entries.items()))


def lr_shape(weight_shape):
    return weight_shape[:1] if len(weight_shape) == 4 else weight_shape


@dataclass
class DetectorOutput:
    cls_map: ad.Node
    reg_map: ad.Node


@dataclass
class LabelTargets:
    cls_target: np.ndarray
    cls_mask: np.ndarray
    reg_target: np.ndarray
    reg_mask: np.ndarray

    @property
    def n_positive(self):
        return int(np.sum(self.cls_mask == POSITIVE))


# -- architecture -----------------------------------------------------------------

def _layer_plan(config):
    """(name, c_in, c_out, stride, relu) for every conv, grouped by stage."""
    chans = (3,) + tuple(config.trunk_channels)
    strides = [2 if i < config.n_downsample else 1 for i in range(len(config.trunk_channels))]
    frozen, tail = [], {"cls": [], "reg": []}
    for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])):
        if i < config.frozen_prefix_layers:
            frozen.append((f"trunk.{i}", c_in, c_out, strides[i], True))
        else:
            for branch in ("cls", "reg"):
                name = f"trunk.{i}" if config.shared_trunk else f"{branch}.trunk.{i}"
                tail[branch].append((name, c_in, c_out, strides[i], True))
    heads = {}
    width = config.trunk_channels[-1]
    for branch, out in (("cls", 1), ("reg", 4)):
        layers = [(f"{branch}.head.{j}", width, width, 1, True) for j in range(config.head_convs - 1)]
        layers.append((f"{branch}.head.{config.head_convs - 1}", width, out, 1, False))
        heads[branch] = layers
    return frozen, tail, heads


def init_params(config, seed=0, alpha_init=1e-3):
    """He-initialised weights; every trainable rate starts at ``alpha_init``."""
    rng = np.random.default_rng(seed)
    frozen, tail, heads = _layer_plan(config)
    entries = OrderedDict()
    dtype = config.dtype

    def add(name, c_in, c_out, trainable, std, bias):
        w = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
        b = np.full(c_out, bias, dtype=dtype) if np.isscalar(bias) else np.asarray(bias, dtype=dtype)
        for suffix, arr in (("w", w), ("b", b)):
            lr = np.full(lr_shape(arr.shape), alpha_init, dtype=dtype) if trainable else None
            entries[f"{name}.{suffix}"] = Param(arr, trainable, lr)

    for name, c_in, c_out, _, _ in frozen:
        add(name, c_in, c_out, False, math.sqrt(2.0 / (9 * c_in)), 0.0)
    seen = set()
    for branch in ("cls", "reg"):
        for name, c_in, c_out, _, _ in tail[branch]:
            if name not in seen:
                seen.add(name)
                add(name, c_in, c_out, True, math.sqrt(2.0 / (9 * c_in)), 0.0)
    for branch in ("cls", "reg"):
        for name, c_in, c_out, _, relu in heads[branch]:
            if relu:
                add(name, c_in, c_out, True, math.sqrt(2.0 / (9 * c_in)), 0.0)
            elif branch == "cls":
                prior = -math.log((1 - 0.01) / 0.01) if config.head_style == ANCHOR_BASED else CENTERNESS_PRIOR
                add(name, c_in, c_out, True, 0.01, prior)
            else:
                bias = 0.0 if config.head_style == ANCHOR_BASED else config.anchor_size / (2 * config.stride)
                add(name, c_in, c_out, True, 0.01, bias)
    return ParamSet(config, entries)


def _check_compatible(params, config):
    frozen, tail, heads = _layer_plan(config)
    expected = {}
    for name, c_in, c_out, _, _ in frozen + tail["cls"] + tail["reg"] + heads["cls"] + heads["reg"]:
        expected[f"{name}.w"] = (c_out, c_in, 3, 3)
        expected[f"{name}.b"] = (c_out,)
    for name, shape in expected.items():
        if name not in params:
            raise KeyError(f"parameter set lacks entry {name!r} required by the detector config")
        got = tuple(params[name].weight.shape)
        if got != shape:
            raise ValueError(f"entry {name!r} has shape {got}, config needs {shape}")


def _to_batch(images, config):
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (config.input_size,) * 2:
        raise ValueError(f"images must be [N, 3, {config.input_size}, {config.input_size}], got {images.shape}")
    return np.ascontiguousarray(images.transpose(1, 0, 2, 3), dtype=config.dtype)


def frozen_features(images, params, config=None):
    """Output of the frozen trunk prefix as a constant array [C, N, h, w]."""
    config = config or params.config
    x = ad.as_node(_to_batch(images, config))
    frozen, _, _ = _layer_plan(config)
    with ad.no_grad():
        for name, _, _, stride, _ in frozen:
            w = ad.as_node(params[f"{name}.w"].weight)
            b = ad.as_node(params[f"{name}.b"].weight)
            x = ad.relu(ad.conv2d(x, w, b, stride, 1))
    return x.value


def forward_features(features, weights, config):
    """Trainable part of the network on precomputed frozen features.

    ``weights`` maps entry names to nodes (or arrays). Returns the batched
    class map [1, N, G, G] and regression map [4, N, G, G].
    """
    _, tail, heads = _layer_plan(config)
    feats = ad.as_node(features)

    def get(name):
        if name not in weights:
            raise KeyError(f"missing parameter entry {name!r}")
        return ad.as_node(weights[name])

    outputs = {}
    shared = None
    for branch in ("cls", "reg"):
        x = feats
        if config.shared_trunk and shared is not None:
            x = shared
        else:
            for name, _, _, stride, _ in tail[branch]:
                x = ad.relu(ad.conv2d(x, get(f"{name}.w"), get(f"{name}.b"), stride, 1))
            if config.shared_trunk:
                shared = x
        for name, _, _, _, relu in heads[branch]:
            x = ad.conv2d(x, get(f"{name}.w"), get(f"{name}.b"), 1, 1)
            if relu:
                x = ad.relu(x)
        outputs[branch] = x
    return outputs["cls"], outputs["reg"]


def weight_nodes(params, names=None):
    names = params.names() if names is None else names
    return OrderedDict((n, ad.as_node(params[n].weight)) for n in names)


def forward(image, params, config=None, weights=None):
    """Run the detector on one image [3, S, S] and return its two maps.

    ``weights`` optionally overrides trainable entries with graph nodes.
    """
    config = config or params.config
    if np.asarray(image).shape != (3, config.input_size, config.input_size):
        raise ValueError(f"image must be [3, {config.input_size}, {config.input_size}], got {np.asarray(image).shape}")
    _check_compatible(params, config)
    feats = frozen_features(image, params, config)
    nodes = weight_nodes(params, params.trainable_names())
    nodes.update(weights or {})
    cls_map, reg_map = forward_features(feats, nodes, config)
    g = config.grid_size
    return DetectorOutput(ad.reshape(cls_map, (1, g, g)), ad.reshape(reg_map, (4, g, g)))


def predict(images, params, config=None):
    """Batched inference without graph: returns (cls [N, G, G], reg [N, 4, G, G]) arrays."""
    config = config or params.config
    feats = frozen_features(images, params, config)
    with ad.no_grad():
        cls_map, reg_map = forward_features(feats, params.weights(), config)
    return cls_map.value[0], reg_map.value.transpose(1, 0, 2, 3)


# -- labels -------------------------------------------------------------------------

def anchor_boxes(config):
    xs, ys = config.cell_centers()
    a = float(config.anchor_size)
    return np.stack([xs, ys, np.full_like(xs, a), np.full_like(ys, a)], axis=-1)


def assign_labels(gt, config):
    """Training targets for one ground-truth box on the output grid."""
    s = config.input_size
    if not gt.intersects(s, s):
        raise ValueError(f"ground-truth box {gt} lies entirely outside the {s}x{s} image")
    g = config.grid_size
    cls_t = np.zeros((1, g, g))
    mask = np.full((1, g, g), NEGATIVE, dtype=np.int8)
    xs, ys = config.cell_centers()
    reg_t = encode(gt, config)
    if config.head_style == ANCHOR_BASED:
        anchors = anchor_boxes(config)
        ious = iou_matrix(anchors.reshape(-1, 4), gt).reshape(g, g)
        pos = ious > 0.5
        mask[0][(ious >= 0.3) & ~pos] = IGNORE
        cls_t[0][pos] = 1.0
    else:
        pos = (np.abs(xs - gt.cx) <= gt.w / 4) & (np.abs(ys - gt.cy) <= gt.h / 4)
        l, t, r, b = reg_t
        with np.errstate(divide="ignore", invalid="ignore"):
            ctr = np.sqrt(np.minimum(l, r) / np.maximum(l, r) * np.minimum(t, b) / np.maximum(t, b))
        cls_t[0][pos] = ctr[pos]
    mask[0][pos] = POSITIVE
    reg_t *= pos[None]
    return LabelTargets(cls_t, mask, reg_t, pos[None].copy())


def encode(gt, config):
    """Regression targets of ``gt`` relative to every cell, unmasked: [4, G, G]."""
    xs, ys = config.cell_centers()
    if config.head_style == ANCHOR_BASED:
        a = float(config.anchor_size)
        return np.stack([(gt.cx - xs) / a, (gt.cy - ys) / a,
                         np.full_like(xs, math.log(gt.w / a)), np.full_like(ys, math.log(gt.h / a))])
    x1, y1, x2, y2 = gt.corners()
    return np.stack([xs - x1, ys - y1, x2 - xs, y2 - ys]) / config.stride


def stack_targets(targets, dtype=np.float64):
    """Batch per-image targets into the channel-major layout [C, N, G, G]."""
    return LabelTargets(
        np.stack([t.cls_target for t in targets], axis=1).astype(dtype),
        np.stack([t.cls_mask for t in targets], axis=1),
        np.stack([t.reg_target for t in targets], axis=1).astype(dtype),
        np.stack([t.reg_mask for t in targets], axis=1),
    )


# -- losses --------------------------------------------------------------------------

def _per_image_sum(x):
    return ad.reduce_sum(x, axes=(0, 2, 3))


def detection_loss(out, targets, config, return_parts=False):
    """Mean per-image detection loss; accepts single-image or batched maps."""
    cls_map, reg_map = out.cls_map, out.reg_map
    tg = targets
    if cls_map.ndim == 3:
        g = cls_map.shape[-1]
        cls_map = ad.reshape(cls_map, (1, 1, g, g))
        reg_map = ad.reshape(reg_map, (4, 1, g, g))
        tg = stack_targets([targets])
    if cls_map.shape != tg.cls_target.shape or reg_map.shape != tg.reg_target.shape:
        raise ValueError(f"prediction shapes {cls_map.shape}/{reg_map.shape} do not match targets "
                         f"{tg.cls_target.shape}/{tg.reg_target.shape}")
    dtype = cls_map.dtype
    n = cls_map.shape[1]
    pos = (tg.cls_mask == POSITIVE).astype(dtype)
    npos = np.maximum(pos.sum(axis=(0, 2, 3)), 1.0)
    inv_npos = ad.as_node((1.0 / npos).astype(dtype))
    reg_mask = ad.as_node(np.broadcast_to(pos, reg_map.shape).astype(dtype))
    logits = ad.clip(cls_map, -LOGIT_CAP, LOGIT_CAP)
    diff = ad.sub(reg_map, ad.as_node(tg.reg_target.astype(dtype)))

    if config.head_style == ANCHOR_BASED:
        neg = (tg.cls_mask == NEGATIVE).astype(dtype)
        p = ad.sigmoid(logits)
        pos_term = ad.mul(ad.mul(ad.square(ad.sub(1.0, p)), ad.softplus(ad.neg(logits))),
                          ad.as_node(FOCAL_ALPHA * pos))
        neg_term = ad.mul(ad.mul(ad.square(p), ad.softplus(logits)),
                          ad.as_node((1 - FOCAL_ALPHA) * neg))
        cls_loss = ad.mul(_per_image_sum(ad.add(pos_term, neg_term)), inv_npos)
        a = ad.absolute(diff)
        quad = ad.as_node((a.value < SMOOTH_L1_BETA).astype(dtype))
        smooth = ad.add(ad.mul(ad.mul(ad.square(diff), 0.5 / SMOOTH_L1_BETA), quad),
                        ad.mul(ad.sub(a, 0.5 * SMOOTH_L1_BETA), ad.sub(1.0, quad)))
        reg_loss = ad.mul(_per_image_sum(ad.mul(smooth, reg_mask)), inv_npos)
    else:
        p = ad.sigmoid(logits)
        sq = ad.square(ad.sub(p, ad.as_node(tg.cls_target.astype(dtype))))
        if config.balanced_centerness:
            # positive and negative cells each carry half of an image's weight
            n_pos = pos.sum(axis=(0, 2, 3), keepdims=True)
            n_neg = np.maximum(pos[0, 0].size - n_pos, 1.0)
            share = np.where(n_pos > 0, 0.5, 0.0)
            wts = share * pos / np.maximum(n_pos, 1.0) + (1 - share) * (1 - pos) / n_neg
            cls_loss = _per_image_sum(ad.mul(sq, ad.as_node(wts.astype(dtype))))
        else:
            cls_loss = ad.mul(_per_image_sum(sq), 1.0 / (cls_map.shape[2] * cls_map.shape[3]))
        l1 = ad.mul(ad.absolute(diff), reg_mask)
        reg_loss = ad.mul(_per_image_sum(l1), ad.as_node((0.25 / npos).astype(dtype)))
    cls_loss = ad.mul(ad.reduce_sum(cls_loss), 1.0 / n)
    reg_loss = ad.mul(ad.reduce_sum(reg_loss), 1.0 / n)
    total = ad.add(cls_loss, ad.mul(reg_loss, config.reg_weight))
    if return_parts:
        return total, cls_loss, reg_loss
    return total


# -- decoding -------------------------------------------------------------------------

def decode_arrays(cls_map, reg_map, config):
    """Vectorised decode of one image's maps ([G, G] and [4, G, G] arrays).

    Returns (boxes [G*G, 4] as cx, cy, w, h; scores [G*G]) in row-major cell order.
    """
    cls_map = np.asarray(cls_map, dtype=np.float64).reshape(config.grid_size, config.grid_size)
    reg = np.asarray(reg_map, dtype=np.float64).reshape(4, config.grid_size, config.grid_size)
    xs, ys = config.cell_centers()
    if config.head_style == ANCHOR_BASED:
        a = float(config.anchor_size)
        cx = xs + reg[0] * a
        cy = ys + reg[1] * a
        w = a * np.exp(np.clip(reg[2], -6.0, 6.0))
        h = a * np.exp(np.clip(reg[3], -6.0, 6.0))
        x1, x2, y1, y2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    else:
        s = config.stride
        x1, y1 = xs - reg[0] * s, ys - reg[1] * s
        x2, y2 = xs + reg[2] * s, ys + reg[3] * s
    x1, x2 = _clip_extent(x1, x2, config.input_size)
    y1, y2 = _clip_extent(y1, y2, config.input_size)
    boxes = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1).reshape(-1, 4)
    scores = 1.0 / (1.0 + np.exp(-np.clip(cls_map, -LOGIT_CAP, LOGIT_CAP)))
    return boxes, scores.reshape(-1)


def _clip_extent(lo, hi, size):
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    lo, hi = np.clip(lo, 0, size), np.clip(hi, 0, size)
    short = hi - lo < MIN_EXTENT
    mid = np.clip((lo + hi) / 2, MIN_EXTENT / 2, size - MIN_EXTENT / 2)
    return np.where(short, mid - MIN_EXTENT / 2, lo), np.where(short, mid + MIN_EXTENT / 2, hi)


def decode(out, config):
    """All cells as (BoundingBox, score) candidates, row-major."""
    cls_map = out.cls_map.value if isinstance(out.cls_map, ad.Node) else out.cls_map
    reg_map = out.reg_map.value if isinstance(out.reg_map, ad.Node) else out.reg_map
    boxes, scores = decode_arrays(cls_map, reg_map, config)
    return [(BoundingBox(*b), float(s)) for b, s in zip(boxes, scores)]


def best_box(cls_map, reg_map, config):
    boxes, scores = decode_arrays(cls_map, reg_map, config)
    k = int(np.argmax(scores))
    return BoundingBox(*boxes[k]), float(scores[k])


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = "MDCKPT1"


def save_checkpoint(path, params, extra=None):
    """Write config block, optional extra key=value lines, then param records."""
    with open(path, "wb") as fh:
        lines = [CKPT_MAGIC] + [f"{k}={v}" for k, v in params.config.to_items()]
        lines += [f"meta.{k}={v}" for k, v in (extra or {}).items()]
        lines.append("end")
        fh.write(("\n".join(lines) + "\n").encode())
        fh.write(struct.pack("<I", len(params.entries)))
        for name, p in params.entries.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", 1 if p.trainable else 0))
            tio.write_tensor(fh, p.weight)
            if p.trainable:
                tio.write_tensor(fh, p.lr)


def _read_text_block(fh, magic):
    first = fh.readline().decode().strip()
    if first != magic:
        raise tio.FormatError(f"expected {magic} header, got {first!r}")
    items = []
    while True:
        line = fh.readline()
        if not line:
            raise tio.FormatError("unterminated key=value block")
        line = line.decode().strip()
        if line == "end":
            return items
        key, _, value = line.partition("=")
        items.append((key, value))


def load_checkpoint(path):
    """Returns (ParamSet, extra dict of the meta.* keys)."""
    with open(path, "rb") as fh:
        items = _read_text_block(fh, CKPT_MAGIC)
        extra = {k[5:]: v for k, v in items if k.startswith("meta.")}
        config = DetectorConfig.from_items([(k, v) for k, v in items if not k.startswith("meta.")])
        (count,) = struct.unpack("<I", fh.read(4))
        entries = OrderedDict()
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            name = fh.read(length).decode()
            (flag,) = struct.unpack("<B", fh.read(1))
            weight = tio.read_tensor(fh)
            lr = tio.read_tensor(fh) if flag else None
            entries[name] = Param(weight, bool(flag), lr)
    params = ParamSet(config, entries)
    _check_compatible(params, config)
    return params, extra


def with_config(params, **changes):
    return ParamSet(replace(params.config, **changes), params.entries)
