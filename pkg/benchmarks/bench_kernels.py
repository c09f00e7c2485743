"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Times each kernel on the shapes the default 32px network sees with a batch of
32, then one full training step (forward + backward) with each backend
swapped in.  Prints a table of best-of-N times and speedups.
"""
import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from phasematch import convnet, kernels

NAMES = ("im2col", "col2im", "maxpool2_forward", "maxpool2_backward", "nms_strict")


@contextmanager
def backend(module):
    saved = {n: getattr(kernels, n) for n in NAMES}
    try:
        for n in NAMES:
            setattr(kernels, n, getattr(module, n))
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def cases(rng):
    x0 = rng.standard_normal((32, 32, 32, 2)).astype(np.float32)
    x1 = rng.standard_normal((32, 14, 14, 32)).astype(np.float32)
    a0 = rng.standard_normal((32, 28, 28, 32)).astype(np.float32)
    _, arg = kernels.python.maxpool2_forward(a0)
    d0 = rng.standard_normal((32, 14, 14, 32)).astype(np.float32)
    c1 = rng.standard_normal((32 * 10 * 10, 32 * 25)).astype(np.float32)
    moment = rng.random((256, 256))
    return {
        "im2col 32x32x2 k5": lambda m: m.im2col(x0, 5),
        "im2col 14x14x32 k5": lambda m: m.im2col(x1, 5),
        "col2im 14x14x32 k5": lambda m: m.col2im(c1, x1.shape, 5),
        "maxpool fwd 28x28x32": lambda m: m.maxpool2_forward(a0),
        "maxpool bwd 28x28x32": lambda m: m.maxpool2_backward(d0, arg, a0.shape),
        "nms 256x256 r5": lambda m: m.nms_strict(moment, 5, 0.5, 16),
    }


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.native is None:
        raise SystemExit("Cython extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)

    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        tp = best(lambda: fn(kernels.python), args.repeat, 5)
        tc = best(lambda: fn(kernels.native), args.repeat, 5)
        print(f"{name:28s} {1e3 * tp:10.3f} {1e3 * tc:10.3f} {tp / tc:8.2f}x")

    params = convnet.init_params(convnet.default_spec(32), seed=0)
    x = rng.standard_normal((32, 32, 32, 2)).astype(np.float32)
    y = np.where(rng.random(32) < 0.5, 1.0, -1.0).astype(np.float32)
    times = {}
    for label, module in (("python", kernels.python), ("cython", kernels.native)):
        with backend(module):
            times[label] = best(lambda: convnet.backward(params, x, y), args.repeat, 3)
    print(f"{'train step (batch 32)':28s} {1e3 * times['python']:10.3f} {1e3 * times['cython']:10.3f} "
          f"{times['python'] / times['cython']:8.2f}x")


if __name__ == "__main__":
    main()
