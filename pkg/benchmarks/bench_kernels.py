"""Timing comparison of the compiled and pure-numpy kernel backends.

Run with: python3 benchmarks/bench_kernels.py [--sizes 256,512,1024]

Both implementations are imported directly (bypassing the env-var
dispatch) so one process can time them side by side on identical
inputs. Reported numbers are best-of-5 wall times.
"""

import argparse
import time

import numpy as np

from warpcost.kernels import _numpy as numpy_impl

try:
    from warpcost.kernels import _native as native_impl
except ImportError:
    native_impl = None


def best_of(fn, repeats=5):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_backend(impl, size, rng):
    img = rng.random((size, size))
    u = rng.normal(0, 2.0, (size, size))
    v = rng.normal(0, 2.0, (size, size))
    patches, ys, xs = impl.extract_patches(img, 8, 1)

    return {
        "bilinear_warp": best_of(lambda: impl.bilinear_warp(img, u, v)),
        "extract_patches": best_of(lambda: impl.extract_patches(img, 8, 1)),
        "accumulate_patches": best_of(
            lambda: impl.accumulate_patches(patches, ys, xs, size, size, 8)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="256,512,1024",
                    help="Comma-separated square image sizes.")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    rng = np.random.default_rng(0)
    header = f"{'kernel':<20} {'size':>6} {'numpy':>10} {'native':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for size in sizes:
        np_times = bench_backend(numpy_impl, size, rng)
        nat_times = (bench_backend(native_impl, size, rng)
                     if native_impl is not None else None)
        for name, t_np in np_times.items():
            if nat_times is None:
                print(f"{name:<20} {size:>6} {t_np * 1e3:>9.2f}ms "
                      f"{'n/a':>10} {'n/a':>8}")
            else:
                t_nat = nat_times[name]
                print(f"{name:<20} {size:>6} {t_np * 1e3:>9.2f}ms "
                      f"{t_nat * 1e3:>9.2f}ms {t_np / t_nat:>7.1f}x")
    if native_impl is None:
        print("\ncompiled backend unavailable; showing numpy only")


if __name__ == "__main__":
    main()
