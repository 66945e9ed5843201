"""Online tracking: first-frame domain adaptation, per-frame detection with
SiamRPN-style post-processing, a pinned support buffer and interval or
PSR-triggered one-step updates."""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import detector as det
from . import meta
from .boxes import BoundingBox
from .synth import crop_search_region, make_support_set

PSR_EXCLUDE = 11   # side of the window around the peak left out of the sidelobe
PSR_EPS = 1e-6
PSR_SQUASH = 5.0


@dataclass(frozen=True)
class TrackerConfig:
    adapt_steps: int = 5
    online_steps: int = 1
    update_interval: int = 10
    score_threshold: float = 0.1
    psr_threshold: float = 0.7
    buffer_capacity: int = 30
    add_to_buffer_score: float = 0.8
    penalty_k: float = 0.04
    window_influence: float = 0.42
    shape_lerp: float = 0.3

    def __post_init__(self):
        if not 0 <= self.window_influence <= 1:
            raise ValueError(f"window_influence must lie in [0, 1], got {self.window_influence}")
        if not 0 < self.shape_lerp <= 1:
            raise ValueError(f"shape_lerp must lie in (0, 1], got {self.shape_lerp}")
        if self.buffer_capacity < 1 or self.update_interval < 1:
            raise ValueError("buffer_capacity and update_interval must be positive")
        if self.adapt_steps < 0 or self.online_steps < 0:
            raise ValueError("step counts must be non-negative")

    def to_items(self):
        return [(f.name.replace("_", "-"), str(getattr(self, f.name))) for f in fields(self)]

    @classmethod
    def from_items(cls, items):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, text in items:
            name = key.replace("-", "_")
            if name not in types:
                raise KeyError(f"unknown tracker config key {key!r}")
            kwargs[name] = det.parse_value(types[name], text)
        return cls(**kwargs)


@dataclass
class TrackerState:
    params: det.ParamSet
    prev_box: BoundingBox
    buffer: list                  # entries of [(patch, box)], entry 0 pinned
    window: np.ndarray            # [G, G]
    frame_index: int = 1          # 1-based index of the last processed frame
    frames_since_update: int = 0
    updates: int = 0              # online GD updates performed
    psr_updates: int = 0          # of which triggered only by the PSR test
    fallbacks: int = 0
    last_psr: float = 0.0
    last: dict = field(default_factory=dict)

    def samples(self):
        return [s for entry in self.buffer for s in entry]


def cosine_window(grid):
    """Separable Hann window over the output grid, peaking at the centre cell(s)."""
    w = np.hanning(grid + 2)[1:-1]
    return np.outer(w, w)


def center_cell(grid):
    """Row-major index of the cell a full-weight window selects."""
    c = (grid - 1) // 2
    return c * grid + c


def peak_to_sidelobe(score_map):
    """Squashed peak-to-sidelobe ratio of a score map, in [0, 1).

    The sidelobe is the map minus an 11x11 window around the peak. Constant
    maps, and maps too small to leave any sidelobe, give 0.
    """
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"score map must be 2-D, got shape {m.shape}")
    peak_idx = np.unravel_index(int(np.argmax(m)), m.shape)
    peak = m[peak_idx]
    if np.all(m == peak):
        return 0.0
    half = PSR_EXCLUDE // 2
    keep = np.ones(m.shape, dtype=bool)
    r, c = peak_idx
    keep[max(r - half, 0):r + half + 1, max(c - half, 0):c + half + 1] = False
    side = m[keep]
    if side.size == 0:
        return 0.0
    s = (peak - side.mean()) / (side.std() + PSR_EPS)
    s = max(s, 0.0)
    return float(s / (s + PSR_SQUASH))


def _size_term(w, h):
    p = (w + h) / 2
    return np.sqrt((w + p) * (h + p))


def shape_penalty(boxes, prev, k):
    """exp(-k * (max(r/r', r'/r) * max(s/s', s'/s) - 1)) per candidate; 1 for an unchanged shape."""
    w, h = boxes[:, 2], boxes[:, 3]
    r, s = w / h, _size_term(w, h)
    r0, s0 = prev.w / prev.h, _size_term(prev.w, prev.h)
    change = np.maximum(r / r0, r0 / r) * np.maximum(s / s0, s0 / s)
    return np.exp(-k * (change - 1.0))


def init(frame, gt, base_params, cfg=TrackerConfig()):
    """Adapt ``base_params`` to the target with ``cfg.adapt_steps`` GD steps
    on the three-image zoom support set. ``base_params`` is not modified."""
    h, w = np.asarray(frame).shape[1:]
    if not gt.intersects(w, h):
        raise ValueError(f"initial box {gt} does not intersect the {w}x{h} frame")
    config = base_params.config
    support = make_support_set(frame, gt, config.input_size)
    params = meta.gd_steps(base_params, support, cfg.adapt_steps)
    return TrackerState(params, gt, [support], cosine_window(config.grid_size))


def track_frame(state, frame, cfg=TrackerConfig()):
    """Locate the target in ``frame``; returns (box, score).

    When every raw score is below the threshold the previous box is returned
    and only the frame counter advances. Otherwise the details needed by
    :func:`end_of_frame` are left in ``state.last``.
    """
    config = state.params.config
    state.frame_index += 1
    patch, tf = crop_search_region(frame, state.prev_box, config.input_size)
    cls_map, reg_map = det.predict(patch[None], state.params)
    boxes, scores = det.decode_arrays(cls_map[0], reg_map[0], config)
    score_map = scores.reshape(config.grid_size, config.grid_size)
    if np.all(scores < cfg.score_threshold):
        state.fallbacks += 1
        state.last = {"fallback": True, "score_map": score_map}
        return state.prev_box, float(scores.max())

    prev_in_patch = tf.to_patch(state.prev_box)
    penalty = shape_penalty(boxes, prev_in_patch, cfg.penalty_k)
    wi = cfg.window_influence
    final = (1 - wi) * penalty * scores + wi * state.window.reshape(-1)
    best = int(np.argmax(final))
    picked = BoundingBox(*boxes[best])
    selected = tf.to_frame(picked)
    lam = cfg.shape_lerp
    fh, fw = np.asarray(frame).shape[1:]
    # keep the centre on the canvas so the next crop stays valid
    cx = min(max(selected.cx, 0.0), float(fw))
    cy = min(max(selected.cy, 0.0), float(fh))
    new = BoundingBox(cx, cy, (1 - lam) * state.prev_box.w + lam * selected.w,
                      (1 - lam) * state.prev_box.h + lam * selected.h)
    state.prev_box = new
    state.last = {"fallback": False, "patch": patch, "box_in_patch": picked, "score": float(scores[best]),
                  "score_map": score_map, "cell": best, "candidate": selected}
    return new, float(scores[best])


def end_of_frame(state, patch, box_in_patch, score, cfg=TrackerConfig(), score_map=None):
    """Buffer maintenance and the online update of the current frame."""
    if score >= cfg.add_to_buffer_score:
        state.buffer.append([(patch, box_in_patch)])
        if len(state.buffer) > cfg.buffer_capacity:
            del state.buffer[1]   # oldest entry that is not pinned
    state.last_psr = peak_to_sidelobe(score_map) if score_map is not None else 0.0
    on_interval = state.frame_index % cfg.update_interval == 0
    triggered = state.last_psr > cfg.psr_threshold
    state.frames_since_update += 1
    if (on_interval or triggered) and cfg.online_steps > 0:
        state.params = meta.gd_steps(state.params, state.samples(), cfg.online_steps)
        state.updates += 1
        state.psr_updates += int(triggered and not on_interval)
        state.frames_since_update = 0
    return state


def step(state, frame, cfg=TrackerConfig()):
    """track_frame followed by end_of_frame when detection succeeded."""
    box, score = track_frame(state, frame, cfg)
    last = state.last
    if not last["fallback"]:
        end_of_frame(state, last["patch"], last["box_in_patch"], last["score"], cfg, last["score_map"])
    return box, score


def track_sequence(frames, first_box, base_params, cfg=TrackerConfig()):
    """Run the tracker over frames; returns (boxes, scores, final state)."""
    if len(frames) < 2:
        raise ValueError("tracking needs at least two frames")
    state = init(frames[0], first_box, base_params, cfg)
    boxes, scores = [first_box], [1.0]
    for frame in frames[1:]:
        box, score = step(state, frame, cfg)
        boxes.append(box)
        scores.append(score)
    return boxes, scores, state


def run_tracker(sequence, base_params, cfg=TrackerConfig()):
    """Boxes B_1..B_N for a sequence, with B_1 the first ground-truth box."""
    boxes, _, _ = track_sequence(sequence.frames, sequence.gt[0], base_params, cfg)
    return boxes


def write_results(path, boxes, scores):
    with open(path, "w") as fh:
        for i, (b, s) in enumerate(zip(boxes, scores)):
            cx, cy, w, h, s = (float(v) for v in (*b.as_tuple(), s))
            fh.write(f"{i} {cx!r} {cy!r} {w!r} {h!r} {s!r}\n")


def read_results(path):
    boxes, scores = [], []
    with open(path) as fh:
        for n, line in enumerate(fh):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6 or int(parts[0]) != len(boxes):
                raise ValueError(f"{path}:{n + 1}: expected 'frame_idx cx cy w h score'")
            boxes.append(BoundingBox(*(float(v) for v in parts[1:5])))
            scores.append(float(parts[5]))
    return boxes, scores
