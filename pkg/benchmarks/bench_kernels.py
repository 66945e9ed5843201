"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times im2col and col2im on the shapes the desk-scale detector actually
sees, then one full loss + backward pass of that detector, under each
available backend. Both backends must give bit-identical outputs; the
script checks that before timing.
"""
import argparse
import timeit

import numpy as np

from metatrack import autodiff as ad, detector as det, kernels, meta
from metatrack.boxes import BoundingBox

# (C, N, H, W, k, stride, pad): stem, trunk and head layers of the default detector
SHAPES = [
    (3, 8, 96, 96, 3, 2, 1),
    (8, 8, 48, 48, 3, 2, 1),
    (16, 8, 24, 24, 3, 2, 1),
    (16, 8, 12, 12, 3, 1, 1),
]


def _out(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_cases(rng):
    for c, n, h, w, k, s, p in SHAPES:
        x = rng.random((c, n, h, w))
        cols = rng.random((c * k * k, n * _out(h, k, s, p) * _out(w, k, s, p)))
        label = f"{c}x{n}x{h}x{w} k{k} s{s}"
        yield f"im2col {label}", lambda x=x, k=k, s=s, p=p: kernels.im2col(x, k, k, s, p)
        yield f"col2im {label}", lambda cols=cols, shape=x.shape, k=k, s=s, p=p: kernels.col2im(cols, shape, k, k, s, p)


def detector_case(rng):
    cfg = det.DetectorConfig(trunk_channels=(8, 16, 16, 16), head_convs=1)
    params = det.init_params(cfg, seed=0, alpha_init=1e-3)
    samples = [(rng.random((3, 96, 96)).astype(np.float32), BoundingBox(48, 48, 30, 24)) for _ in range(8)]
    batch = meta.prepare(samples, params)

    def step():
        weights, _ = meta.make_leaves(params, learn_lr=False)
        loss = meta.batch_loss(weights, batch, cfg)
        ad.grad(loss, list(weights.values()))

    return "detector loss+backward, batch 8", step


def check_identical(rng):
    if len(kernels.available_backends()) < 2:
        return
    for c, n, h, w, k, s, p in SHAPES:
        x = rng.random((c, n, h, w))
        outs = []
        for name in ("python", "cython"):
            kernels.use_backend(name)
            cols = kernels.im2col(x, k, k, s, p)
            outs.append((cols, kernels.col2im(cols, x.shape, k, k, s, p)))
        assert all(np.array_equal(a, b) for a, b in zip(*outs)), "backends disagree"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    original = kernels.BACKEND
    check_identical(rng)
    backends = kernels.available_backends()
    cases = list(kernel_cases(rng)) + [detector_case(rng)]
    times = {}
    for name in backends:
        kernels.use_backend(name)
        times[name] = [bench(fn, args.repeat) for _, fn in cases]
    kernels.use_backend(original)

    width = max(len(label) for label, _ in cases)
    print(f"{'case':<{width}}  " + "  ".join(f"{b + ' ms':>10}" for b in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for i, (label, _) in enumerate(cases):
        row = f"{label:<{width}}  " + "  ".join(f"{times[b][i]:>10.3f}" for b in backends)
        if len(backends) == 2:
            row += f"  {times['python'][i] / times['cython'][i]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
