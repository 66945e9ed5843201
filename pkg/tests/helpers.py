"""Finite-difference oracles and small fixtures shared by the test modules."""

import numpy as np

from metatrack import autodiff as ad
from metatrack import detector as det
from metatrack.boxes import BoundingBox


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f at array x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def conv_oracle(x, k, b, stride, pad):
    """Direct nested-loop cross-correlation of one image [C, H, W]."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += xp[c, i * stride + dy, j * stride + dx] * k[o, c, dy, dx]
                out[o, i, j] = acc + b[o]
    return out


def rel_error(analytic, numeric, floor=1e-6):
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def toy_config(head_style=det.ANCHOR_FREE, **kw):
    """A detector under 200 trainable parameters, in double precision."""
    base = dict(head_style=head_style, input_size=16, stride=4, anchor_size=8.0, trunk_channels=(2, 2),
                frozen_prefix_layers=1, head_convs=1, precision="double")
    base.update(kw)
    return det.DetectorConfig(**base)


def toy_samples(rng, n, size=16):
    out = []
    for _ in range(n):
        img = rng.random((3, size, size))
        w, h = rng.uniform(5, 9, 2)
        cx, cy = rng.uniform(5, size - 5, 2)
        out.append((img, BoundingBox(cx, cy, w, h)))
    return out


def scalar(node):
    return float(np.asarray(node.value).reshape(-1)[0])


def value_of(fn, *arrays):
    """Evaluate a node-valued function on constant arrays, returning a float."""
    with ad.no_grad():
        return scalar(fn(*[ad.tensor(a) for a in arrays]))


def brute_force_labels(gt, config):
    """Per-cell label oracle: (mask [G, G] of +1/0/-1, centerness [G, G])."""
    from metatrack.boxes import iou

    g, s = config.grid_size, config.stride
    mask = np.zeros((g, g), dtype=int)
    ctr = np.zeros((g, g))
    for i in range(g):
        for j in range(g):
            x, y = (j + 0.5) * s, (i + 0.5) * s
            if config.head_style == det.ANCHOR_BASED:
                v = iou(BoundingBox(x, y, config.anchor_size, config.anchor_size), gt)
                mask[i, j] = 1 if v > 0.5 else (0 if v < 0.3 else -1)
            elif gt.cx - gt.w / 4 <= x <= gt.cx + gt.w / 4 and gt.cy - gt.h / 4 <= y <= gt.cy + gt.h / 4:
                mask[i, j] = 1
                l, r = x - (gt.cx - gt.w / 2), gt.cx + gt.w / 2 - x
                t, b = y - (gt.cy - gt.h / 2), gt.cy + gt.h / 2 - y
                ctr[i, j] = np.sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b))
    return mask, ctr


def random_inside_box(rng, size, lo=8.0, hi=60.0):
    """A box fully inside a size x size image."""
    w, h = rng.uniform(lo, min(hi, size - 2), 2)
    cx = rng.uniform(w / 2 + 0.5, size - w / 2 - 0.5)
    cy = rng.uniform(h / 2 + 0.5, size - h / 2 - 0.5)
    return BoundingBox(cx, cy, w, h)
