"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 128]

Both backends get the same inputs; each row also reports the largest
absolute difference between their outputs.
"""
import argparse
import statistics
import time

import numpy as np

from vip2clip import numerics
from vip2clip.numerics import _fallback

try:
    from vip2clip.numerics import _kernels
except ImportError:  # extension not built
    _kernels = None


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def cases(size, rng):
    grid = rng.random((16, 16))
    image = rng.random((size, size))
    kernel = numerics.gaussian_kernel(4.0)
    masks = (rng.random((size, size)) > 0.6).astype(np.uint8)
    n = 100 * size * size // 16
    groups = rng.integers(0, 40, size=n).astype(np.int64)
    bins = rng.integers(0, 201, size=n).astype(np.int64)
    return [
        ("upsample 16x16 -> size", lambda b: b.upsample_bilinear(grid, size, size)),
        ("gaussian sigma=4", lambda b: b.gaussian_smooth(image, kernel)),
        ("label components", lambda b: b.label_components(masks)[0]),
        ("threshold counts", lambda b: b.threshold_counts(groups, bins, 40, 200)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=128)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; only the fallback can run")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max diff':>12}")
    for name, call in cases(args.size, rng):
        t_py, out_py = timed(lambda: call(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:<24}{t_py * 1e3:>12.3f}{'-':>12}{'-':>10}{'-':>12}")
            continue
        t_cy, out_cy = timed(lambda: call(_kernels), args.repeat)
        diff = float(np.max(np.abs(np.asarray(out_py, dtype=np.float64) - np.asarray(out_cy, dtype=np.float64))))
        print(f"{name:<24}{t_py * 1e3:>12.3f}{t_cy * 1e3:>12.3f}{t_py / t_cy:>10.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
