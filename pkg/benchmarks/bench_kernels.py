"""Timing comparison of the compiled and numpy convolution backends.

Run: python3 benchmarks/bench_kernels.py [--repeats N]

Shapes mirror the heavy layers of the default model at 64x64 input. Both
backends are called directly so one process can time the pair; a parity
column reports the max absolute difference on shared random inputs.
"""

import argparse
import time

import numpy as np

from firesense import _kernels_np
from firesense.rng import rng_for

try:
    from firesense import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [
    # (cin, cout, k, h, w, stride, pad) roughly matching encoder/decoder layers
    ("branch 3x3 @64", 16, 16, 3, 64, 64, 1, 1),
    ("weather 5x5 @64", 8, 16, 5, 64, 64, 1, 2),
    ("mid 3x3 @32", 32, 32, 3, 32, 32, 1, 1),
    ("deep 3x3 @16", 64, 64, 3, 16, 16, 1, 1),
    ("bottleneck 3x3 @8", 128, 256, 3, 8, 8, 1, 1),
    ("decoder 3x3 @64", 48, 32, 3, 64, 64, 1, 1),
]


def _time(fn, repeats: int) -> float:
    fn()  # warmup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _ckernels is None:
        print("compiled backend unavailable; benchmarking numpy only")

    header = f"{'layer':<20} {'dir':<8} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    rng = rng_for(0, "bench")
    for name, cin, cout, k, h, w, stride, pad in SHAPES:
        x = rng.normal(size=(cin, h, w)).astype(np.float32)
        wgt = (rng.normal(size=(cout, cin, k, k)) * 0.1).astype(np.float32)
        b = rng.normal(size=(cout,)).astype(np.float32)
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        gy = rng.normal(size=(cout, ho, wo)).astype(np.float32)

        rows = [("forward", lambda m: m.conv2d_forward(x, wgt, b, stride, pad)),
                ("backward", lambda m: m.conv2d_backward(x, wgt, gy, stride, pad))]
        for direction, call in rows:
            t_np = _time(lambda: call(_kernels_np), args.repeats)
            if _ckernels is None:
                print(f"{name:<20} {direction:<8} {t_np * 1e3:>10.3f} {'-':>10} {'-':>8} {'-':>10}")
                continue
            t_cy = _time(lambda: call(_ckernels), args.repeats)
            out_np = call(_kernels_np)
            out_cy = call(_ckernels)
            if direction == "forward":
                diff = float(np.abs(np.asarray(out_np, dtype=np.float64)
                                    - np.asarray(out_cy, dtype=np.float64)).max())
            else:
                diff = max(float(np.abs(np.asarray(a, dtype=np.float64)
                                        - np.asarray(c, dtype=np.float64)).max())
                           for a, c in zip(out_np, out_cy))
            print(f"{name:<20} {direction:<8} {t_np * 1e3:>10.3f} {t_cy * 1e3:>10.3f} "
                  f"{t_np / t_cy:>7.2f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
