"""Time the numba and numpy paths of the sampling kernels and check they agree.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from mulan import _accel


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    n = args.n
    scores = np.random.default_rng(0).standard_normal((n // 50, 50))
    cases = {
        "gamma(1/15)": lambda jit: _accel.standard_gamma(1 / 15, (n,), np.random.default_rng(1), use_numba=jit),
        "topk(k=15, m=50)": lambda jit: _accel.topk_rows(scores, 15, use_numba=jit),
        "trunc-normal(3)": lambda jit: _accel.truncated_normal((n,), 3.0, np.random.default_rng(2), use_numba=jit),
    }
    print(f"numba available: {_accel.HAS_NUMBA}")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max rel diff':>14}")
    for name, fn in cases.items():
        t_np, out_np = _best(lambda: fn(False), args.repeat)
        if _accel.HAS_NUMBA:
            fn(True)  # compile outside the timed region
            t_jit, out_jit = _best(lambda: fn(True), args.repeat)
            rel = float(np.max(np.abs(out_np - out_jit) / np.maximum(np.abs(out_np), 1e-300)))
            print(f"{name:<20}{1e3 * t_np:>12.2f}{1e3 * t_jit:>12.2f}{t_np / t_jit:>10.2f}{rel:>14.1e}")
        else:
            print(f"{name:<20}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}{'-':>14}")


if __name__ == "__main__":
    main()
