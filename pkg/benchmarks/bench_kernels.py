"""Compare the numpy and cython kernel backends on model-sized workloads.

Shapes mirror what the default 64x64 depth-2 trainer actually runs: trunk
convolutions (3x3, stride 1, padded by the caller), 1x1 head convolutions,
2x2 max pooling, bilinear doubling and batchnorm sweeps, all at batch 16.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--batch N]
"""

import argparse
import time

import numpy as np

from fluidseg._kernels import numpy_backend

try:
    from fluidseg._kernels import _convkernels as cython_backend
except ImportError:
    cython_backend = None


def timeit(fn, repeats):
    fn()  # warm caches and scratch buffers
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_cases(batch):
    # (name, n, ci, co, h, kernel, stride)  h is the padded input size
    return [
        ("conv3x3 in", batch, 3, 8, 66, 3, 1),
        ("conv3x3 8ch", batch, 8, 8, 66, 3, 1),
        ("conv3x3 16ch", batch, 16, 16, 34, 3, 1),
        ("conv3x3 32ch", batch, 32, 32, 18, 3, 1),
        ("conv3x3 dec", batch, 48, 16, 34, 3, 1),
        ("conv1x1 head", batch, 8, 8, 64, 1, 1),
    ]


def bench_backend(impl, batch, repeats, rng):
    rows = {}
    for name, n, ci, co, h, k, stride in conv_cases(batch):
        xp = rng.normal(size=(n, ci, h, h))
        w = rng.normal(size=(co, ci, k, k))
        bias = rng.normal(size=co)
        ho = (h - k) // stride + 1
        gy = rng.normal(size=(n, co, ho, ho))
        pad = 1 if k == 3 else 0
        rows[name + " fwd"] = timeit(
            lambda: impl.conv2d_forward(xp, w, stride, bias), repeats)
        rows[name + " bwd"] = timeit(
            lambda: impl.conv2d_backward(xp, w, gy, stride, pad), repeats)

    x = rng.normal(size=(batch, 8, 64, 64))
    rows["maxpool2x2 fwd"] = timeit(lambda: impl.maxpool2d_forward(x, 2, 2), repeats)
    _, idx = impl.maxpool2d_forward(x, 2, 2)
    g = rng.normal(size=(batch, 8, 32, 32))
    rows["maxpool2x2 bwd"] = timeit(
        lambda: impl.maxpool2d_backward(np.asarray(idx), g, 64, 64), repeats)

    small = rng.normal(size=(batch, 16, 32, 32))
    rows["bilinear x2 fwd"] = timeit(
        lambda: impl.bilinear_forward(small, 64, 64), repeats)
    gup = rng.normal(size=(batch, 16, 64, 64))
    rows["bilinear x2 bwd"] = timeit(
        lambda: impl.bilinear_backward(gup, 32, 32), repeats)

    xb = rng.normal(size=(batch, 16, 32, 32))
    gb = rng.normal(size=(batch, 16, 32, 32))
    scale = rng.normal(size=16)
    rows["bn stats"] = timeit(lambda: impl.bn2d_stats(xb), repeats)
    rows["bn apply"] = timeit(lambda: impl.bn2d_apply(xb, scale, scale), repeats)
    rows["bn grad stats"] = timeit(lambda: impl.bn2d_grad_stats(gb, xb), repeats)
    rows["bn grad input"] = timeit(
        lambda: impl.bn2d_grad_input(gb, xb, scale, scale, scale), repeats)
    flat = rng.normal(size=batch * 8 * 64 * 64)
    gflat = rng.normal(size=flat.size)
    rows["relu bwd"] = timeit(lambda: impl.relu_backward(flat, gflat), repeats)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed repeats, best-of")
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    numpy_rows = bench_backend(numpy_backend, args.batch, args.repeats, rng)
    cython_rows = None
    if cython_backend is not None:
        cython_rows = bench_backend(cython_backend, args.batch, args.repeats, rng)
    else:
        print("compiled extension not available; timing the numpy backend only\n")

    width = max(len(k) for k in numpy_rows)
    header = f"{'kernel':<{width}}  {'numpy':>9}"
    if cython_rows:
        header += f"  {'cython':>9}  {'speedup':>7}"
    print(header)
    print("-" * len(header))
    total_np = total_cy = 0.0
    for name, t_np in numpy_rows.items():
        total_np += t_np
        line = f"{name:<{width}}  {t_np * 1e3:8.2f}ms"
        if cython_rows:
            t_cy = cython_rows[name]
            total_cy += t_cy
            line += f"  {t_cy * 1e3:8.2f}ms  {t_np / t_cy:6.2f}x"
        print(line)
    print("-" * len(header))
    line = f"{'total':<{width}}  {total_np * 1e3:8.2f}ms"
    if cython_rows:
        line += f"  {total_cy * 1e3:8.2f}ms  {total_np / total_cy:6.2f}x"
    print(line)


if __name__ == "__main__":
    main()
