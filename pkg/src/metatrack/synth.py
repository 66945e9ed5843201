"""Deterministic synthetic tracking videos, search-region crops and task sampling.

A sequence is fully determined by ``(config.seed, instance_id, variant)``:
the instance (shape, colours, stripe texture, base size) depends only on
``(seed, instance_id)``, while the scene (background, motion, distractors)
also depends on ``variant``. Rendering one instance into another sequence's
scene is how cross-sequence training pairs are built.
"""

import functools
import math
import os
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .autodiff import io as tio
from .boxes import BoundingBox
from .detector import parse_value

SHAPES = ("rectangle", "ellipse", "triangle")
ZOOM = 1.08
SAME_SEQUENCE_PROB = 0.8


@dataclass(frozen=True)
class SynthConfig:
    canvas_size: int = 128
    shapes: tuple = SHAPES
    size_min: float = 20.0
    size_max: float = 30.0
    aspect_min: float = 0.7
    aspect_max: float = 1.4
    color_min: float = 0.1
    color_max: float = 0.9
    texture_min: float = 0.1
    texture_max: float = 0.3
    background_contrast: float = 0.2
    translate_sigma: float = 1.0
    scale_sigma: float = 0.01
    appearance_sigma: float = 0.005
    distractors: int = 2
    length: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("translate_sigma", "scale_sigma", "appearance_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.length < 2:
            raise ValueError("sequence length must be at least 2")
        if self.distractors < 0:
            raise ValueError("distractor count must be non-negative")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}; choose from {SHAPES}")
        if not 0 < self.size_min <= self.size_max < self.canvas_size / 2:
            raise ValueError("object size range must satisfy 0 < min <= max < canvas/2")

    def to_items(self):
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append((f.name.replace("_", "-"), str(value)))
        return out

    @classmethod
    def from_items(cls, items):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, text in items:
            name = key.replace("-", "_")
            if name not in types:
                raise KeyError(f"unknown synth config key {key!r}")
            if name == "shapes":
                kwargs[name] = tuple(s for s in text.split(",") if s)
            else:
                kwargs[name] = parse_value(types[name], text)
        return cls(**kwargs)


@dataclass(frozen=True)
class Instance:
    shape: str
    aspect: float
    base_size: float
    color: tuple
    stripe_color: tuple
    stripe_freq: float
    stripe_angle: float


@dataclass
class Sequence:
    frames: list
    gt: list
    instance_id: int
    config: SynthConfig = None
    variant: int = 0
    masks: list = None

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise ValueError(f"{len(self.frames)} frames but {len(self.gt)} boxes")

    def __len__(self):
        return len(self.frames)


@dataclass
class Task:
    support: list
    target: list
    same_sequence: bool = True

    def __post_init__(self):
        if not self.support or not self.target:
            raise ValueError("task needs a non-empty support set and target set")


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def make_instance(config, instance_id, rng=None):
    rng = rng if rng is not None else _rng(config.seed, instance_id, 0)
    lo, hi = config.color_min, config.color_max
    color = rng.uniform(lo, hi, 3)
    contrast = rng.uniform(config.texture_min, config.texture_max)
    stripe = np.clip(color + contrast * rng.choice([-1.0, 1.0], 3), 0.0, 1.0)
    return Instance(
        shape=str(rng.choice(config.shapes)),
        aspect=float(math.exp(rng.uniform(math.log(config.aspect_min), math.log(config.aspect_max)))),
        base_size=float(rng.uniform(config.size_min, config.size_max)),
        color=tuple(float(c) for c in color),
        stripe_color=tuple(float(c) for c in stripe),
        stripe_freq=float(rng.uniform(1.0, 3.0)),
        stripe_angle=float(rng.uniform(0, math.pi)),
    )


@dataclass
class _Scene:
    background: np.ndarray
    centers: np.ndarray       # [T, 2]
    log_scale: np.ndarray     # [T]
    drift: np.ndarray         # [T, 3]
    distractors: list         # (Instance, centers [T, 2], drift [T, 3])
    target_size: float


def _reflect(value, lo, hi):
    span = hi - lo
    if span <= 0:
        return (lo + hi) / 2, -1.0
    y = (value - lo) % (2 * span)
    if y > span:
        return lo + 2 * span - y, -1.0
    return lo + y, 1.0


def _background(config, rng):
    n = config.canvas_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = rng.uniform(0.25, 0.75, 3)
    img = np.empty((3, n, n))
    for c in range(3):
        field = np.zeros((n, n))
        for _ in range(3):
            fx, fy = rng.uniform(-4, 4, 2)
            field += np.sin(2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))
        img[c] = base[c] + config.background_contrast * field / 3
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


@functools.lru_cache(maxsize=256)
def _scene(config, instance_id, variant):
    rng = _rng(config.seed, instance_id, variant, 1)
    inst = make_instance(config, instance_id)
    n, T = config.canvas_size, config.length
    background = _background(config, rng)

    size = inst.base_size
    half = size * math.sqrt(max(config.aspect_max, 1 / config.aspect_min)) * 1.3 / 2
    centers = np.empty((T, 2))
    log_scale = np.empty(T)
    drift = np.empty((T, 3))
    pos = rng.uniform(half + size, n - half - size, 2)
    vel = np.zeros(2)
    ls = 0.0
    col = np.zeros(3)
    for t in range(T):
        if t:
            vel = 0.9 * vel + config.translate_sigma * rng.standard_normal(2)
            pos = pos + vel
            ls = 0.95 * ls + config.scale_sigma * rng.standard_normal()
            col = col + config.appearance_sigma * rng.standard_normal(3)
        extent = half * math.exp(ls)
        for k in range(2):
            pos[k], flip = _reflect(pos[k], extent, n - extent)
            vel[k] *= flip
        centers[t] = pos
        log_scale[t] = ls
        drift[t] = col

    distractors = []
    angle0 = rng.uniform(0, 2 * math.pi)
    for k in range(config.distractors):
        d_inst = make_instance(config, 0, rng=_rng(config.seed, instance_id, variant, 100 + k))
        if rng.random() < 0.5:
            d_inst = Instance(inst.shape, d_inst.aspect, d_inst.base_size, d_inst.color,
                              d_inst.stripe_color, d_inst.stripe_freq, d_inst.stripe_angle)
        angle = angle0 + 2 * math.pi * k / max(config.distractors, 1)
        radius = 1.35 * (size + d_inst.base_size) / 2 * 1.2
        offset = radius * np.array([math.cos(angle), math.sin(angle)])
        d_half = d_inst.base_size * math.sqrt(max(config.aspect_max, 1 / config.aspect_min)) / 2
        d_pos = centers[0] + offset
        d_vel = np.zeros(2)
        d_centers = np.empty((T, 2))
        d_drift = np.empty((T, 3))
        d_col = np.zeros(3)
        for t in range(T):
            if t:
                pull = 0.1 * (centers[t] + offset - d_pos)
                d_vel = 0.8 * d_vel + pull + config.translate_sigma * rng.standard_normal(2)
                d_pos = d_pos + d_vel
                d_col = d_col + config.appearance_sigma * rng.standard_normal(3)
            for j in range(2):
                d_pos[j], flip = _reflect(d_pos[j], d_half, n - d_half)
                d_vel[j] *= flip
            d_centers[t] = d_pos
            d_drift[t] = d_col
        distractors.append((d_inst, d_centers, d_drift))
    return _Scene(background, centers, log_scale, drift, distractors, size)


def _box_for(inst, center, log_scale):
    size = inst.base_size * math.exp(log_scale)
    r = math.sqrt(inst.aspect)
    return BoundingBox(float(center[0]), float(center[1]), size * r, size / r)


def _draw(img, mask, inst, box, drift, label):
    n = img.shape[-1]
    x1, y1, x2, y2 = box.corners()
    c0, c1 = max(int(math.floor(x1)), 0), min(int(math.ceil(x2)), n)
    r0, r1 = max(int(math.floor(y1)), 0), min(int(math.ceil(y2)), n)
    if c0 >= c1 or r0 >= r1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1] + 0.5
    u = (xx - box.cx) / (box.w / 2)
    v = (yy - box.cy) / (box.h / 2)
    if inst.shape == "rectangle":
        inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    elif inst.shape == "ellipse":
        inside = u * u + v * v <= 1
    else:  # upward triangle inscribed in the box
        inside = (v <= 1) & (v >= -1) & (np.abs(u) <= (v + 1) / 2)
    phase = 2 * math.pi * inst.stripe_freq * (u * math.cos(inst.stripe_angle) + v * math.sin(inst.stripe_angle))
    blend = 0.5 + 0.5 * np.sin(phase)
    for c in range(3):
        color = inst.color[c] * (1 - blend) + inst.stripe_color[c] * blend + drift[c]
        img[c, r0:r1, c0:c1][inside] = np.clip(color, 0.0, 1.0)[inside]
    mask[r0:r1, c0:c1][inside] = label


def render_frame(config, instance_id, t, variant=0, instance=None):
    """Render frame ``t`` of a scene, optionally swapping in another instance.

    Returns (image [3, H, W] float32, box, mask [H, W] with 0 background,
    1 target and 2.. distractors).
    """
    scene = _scene(config, instance_id, variant)
    inst = instance if instance is not None else make_instance(config, instance_id)
    img = scene.background.copy()
    mask = np.zeros(img.shape[1:], dtype=np.int16)
    for k, (d_inst, d_centers, d_drift) in enumerate(scene.distractors):
        _draw(img, mask, d_inst, _box_for(d_inst, d_centers[t], 0.0), d_drift[t], k + 2)
    box = _box_for(inst, scene.centers[t], scene.log_scale[t])
    _draw(img, mask, inst, box, scene.drift[t], 1)
    return img.astype(np.float32), box, mask


def generate_sequence(config, instance_id, variant=0, with_masks=False):
    frames, gt, masks = [], [], []
    for t in range(config.length):
        img, box, mask = render_frame(config, instance_id, t, variant)
        frames.append(img)
        gt.append(box)
        if with_masks:
            masks.append(mask)
    return Sequence(frames, gt, instance_id, config, variant, masks if with_masks else None)


# -- cropping --------------------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Maps frame coordinates to patch coordinates: p = (f - origin) * scale."""

    x0: float
    y0: float
    scale: float

    def to_patch(self, box):
        k = self.scale
        return BoundingBox((box.cx - self.x0) * k, (box.cy - self.y0) * k, box.w * k, box.h * k)

    def to_frame(self, box):
        k = self.scale
        return BoundingBox(box.cx / k + self.x0, box.cy / k + self.y0, box.w / k, box.h / k)


def context_side(box):
    """Side of the square search region around ``box`` before resizing."""
    p = (box.w + box.h) / 4
    return 2.0 * math.sqrt((box.w + p) * (box.h + p))


def crop_square(frame, cx, cy, side, out_size):
    """Bilinearly resample a square window; outside pixels take the frame's mean color."""
    frame = np.asarray(frame)
    k = out_size / side
    x0, y0 = cx - side / 2, cy - side / 2
    grid = (np.arange(out_size) + 0.5) / k - 0.5
    ys, xs = np.meshgrid(grid + y0, grid + x0, indexing="ij")
    means = frame.reshape(frame.shape[0], -1).mean(axis=1)
    patch = np.empty((frame.shape[0], out_size, out_size), dtype=frame.dtype)
    for c in range(frame.shape[0]):
        patch[c] = ndimage.map_coordinates(frame[c], [ys, xs], order=1, mode="grid-constant",
                                           cval=float(means[c]), prefilter=False)
    return np.clip(patch, 0.0, 1.0), CropTransform(x0, y0, k)


def crop_search_region(frame, box, out_size, side_scale=1.0):
    """Square context crop centred on ``box``, resized to ``out_size``."""
    return crop_square(frame, box.cx, box.cy, context_side(box) * side_scale, out_size)


def make_support_set(frame, box, out_size):
    """Three zoomed crops (in, plain, out) and the target box in each."""
    out = []
    for s in (1 / ZOOM, 1.0, ZOOM):
        patch, tf = crop_search_region(frame, box, out_size, side_scale=s)
        out.append((patch, tf.to_patch(box)))
    return out


def jittered_crop(frame, box, out_size, rng, shift=0.25, scale_jitter=0.1):
    """Search-region crop around a randomly shifted and rescaled box."""
    side = context_side(box) * math.exp(rng.uniform(-scale_jitter, scale_jitter))
    dx, dy = rng.uniform(-shift, shift, 2) * side
    patch, tf = crop_square(frame, box.cx + dx, box.cy + dy, side, out_size)
    return patch, tf.to_patch(box)


def sample_task(pool, rng, out_size=96, shift=0.25, scale_jitter=0.1,
                same_prob=SAME_SEQUENCE_PROB, index=None):
    """Support set from one frame and a one-image target set from another.

    With probability ``same_prob`` the target frame comes from the same
    sequence; otherwise the same instance is rendered into another pool
    sequence's scene. ``index`` fixes the support sequence instead of
    drawing it.
    """
    if len(pool) < 2:
        raise ValueError(f"task sampling needs at least 2 sequences, pool has {len(pool)}")
    i = int(rng.integers(len(pool))) if index is None else index
    seq = pool[i]
    ts = int(rng.integers(len(seq)))
    support = make_support_set(seq.frames[ts], seq.gt[ts], out_size)
    same = bool(rng.random() < same_prob)
    if same:
        tt = int(rng.integers(len(seq) - 1))
        tt += tt >= ts
        frame, box = seq.frames[tt], seq.gt[tt]
    else:
        j = int(rng.integers(len(pool) - 1))
        j += j >= i
        other = pool[j]
        tt = int(rng.integers(len(other)))
        inst = make_instance(seq.config, seq.instance_id)
        frame, box, _ = render_frame(other.config, other.instance_id, tt, other.variant, instance=inst)
    target = [jittered_crop(frame, box, out_size, rng, shift, scale_jitter)]
    return Task(support, target, same)


# -- export / import -------------------------------------------------------------------

def save_sequence(seq, directory):
    os.makedirs(directory, exist_ok=True)
    lines = [f"{k}={v}" for k, v in seq.config.to_items()]
    lines += [f"instance-id={seq.instance_id}", f"variant={seq.variant}", f"frames={len(seq)}"]
    lines += [f"{i} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}" for i, b in enumerate(seq.gt)]
    with open(os.path.join(directory, "meta.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for i, frame in enumerate(seq.frames):
        tio.save_tensor(os.path.join(directory, f"frame_{i:04d}.mdt"), frame)


def read_meta(directory):
    items, gt = [], []
    with open(os.path.join(directory, "meta.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" in line:
                key, _, value = line.partition("=")
                items.append((key, value))
            else:
                idx, cx, cy, w, h = line.split()
                gt.append((int(idx), BoundingBox(float(cx), float(cy), float(w), float(h))))
    return dict(items), [b for _, b in sorted(gt, key=lambda p: p[0])]


def load_sequence(directory):
    meta, gt = read_meta(directory)
    extra = {"instance-id", "variant", "frames"}
    config = SynthConfig.from_items([(k, v) for k, v in meta.items() if k not in extra])
    frames = [tio.load_tensor(os.path.join(directory, f"frame_{i:04d}.mdt")) for i in range(len(gt))]
    return Sequence(frames, gt, int(meta["instance-id"]), config, int(meta.get("variant", 0)))


def list_sequences(dataset_dir):
    if os.path.isfile(os.path.join(dataset_dir, "meta.txt")):
        return [dataset_dir]
    names = sorted(d for d in os.listdir(dataset_dir)
                   if os.path.isfile(os.path.join(dataset_dir, d, "meta.txt")))
    if not names:
        raise FileNotFoundError(f"no sequences found under {dataset_dir}")
    return [os.path.join(dataset_dir, d) for d in names]
