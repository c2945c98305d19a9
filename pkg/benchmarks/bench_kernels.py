"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--rays 1024] [--samples 64] [--size 64]

Prints the best-of-``repeat`` wall time per call for each backend and the
largest absolute difference between their outputs.
"""

import argparse
import time

import numpy as np

from fsnerf import _kernels_py, kernels

try:
    from fsnerf import _ckernels
except ImportError:
    _ckernels = None


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rays, samples, size, rng):
    sigma = rng.exponential(2.0, (rays, samples)).astype(np.float32)
    delta = rng.uniform(0.01, 0.1, (rays, samples)).astype(np.float32)
    weights, trans = kernels.composite_forward(sigma, delta, impl=_kernels_py)
    gw = rng.normal(size=(rays, samples)).astype(np.float32)
    gt = rng.normal(size=rays).astype(np.float32)
    n = size * size
    u, v = rng.uniform(0, size, n), rng.uniform(0, size, n)
    z = rng.uniform(1.0, 3.0, n)
    values = rng.uniform(size=(n, 3))
    return {
        "composite_forward": lambda impl: kernels.composite_forward(sigma, delta, impl=impl),
        "composite_backward": lambda impl: kernels.composite_backward(gw, gt, weights, trans, delta, impl=impl),
        "scatter": lambda impl: kernels.scatter(u, v, z, values, size, size, 0.05, 0.05, impl=impl),
    }


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    out = 0.0
    for x, y in zip(a, b):
        x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
        with np.errstate(invalid="ignore"):
            d = np.where(x == y, 0.0, np.abs(x - y))  # equal infinities count as a match
        out = max(out, float(np.max(d, initial=0.0)))
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--size", type=int, default=64, help="scatter image side; one point per pixel")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"dispatch backend: {kernels.BACKEND}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, call in cases(args.rays, args.samples, args.size, np.random.default_rng(args.seed)).items():
        t_py = best_time(lambda: call(_kernels_py), args.repeat)
        if _ckernels is None:
            print(f"{name:<20} {t_py * 1e3:>10.3f} {'-':>10} {'-':>8} {'-':>10}")
            continue
        t_c = best_time(lambda: call(_ckernels), args.repeat)
        diff = max_diff(call(_kernels_py), call(_ckernels))
        print(f"{name:<20} {t_py * 1e3:>10.3f} {t_c * 1e3:>10.3f} {t_py / t_c:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
