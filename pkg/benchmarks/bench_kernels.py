"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""
import argparse
import timeit

import numpy as np

from stengression import kernels


def cases(rng):
    walks = rng.normal(size=(60, 450)).cumsum(axis=1)
    members = rng.normal(size=(100, 300))
    actual = rng.normal(size=300)
    return {
        "kpss_statistics (60 x 450, 17 lags)": ("kpss_statistics", (walks, 17)),
        "crps_ensemble (M=100, 300 cells)": ("crps_ensemble", (members, actual)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if kernels.compiled is None:
        print("compiled extension unavailable; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'python (us)':>12s} {'compiled (us)':>14s} {'speedup':>8s}")
    for label, (name, call_args) in cases(rng).items():
        timings = {}
        for backend_name, backend in (("python", kernels.fallback), ("compiled", kernels.compiled)):
            if backend is None:
                continue
            fn = getattr(backend, name)
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*call_args), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(*call_args), number=number, repeat=args.repeat))
            timings[backend_name] = 1e6 * best / number
        py = timings["python"]
        comp = timings.get("compiled")
        if comp is None:
            print(f"{label:42s} {py:12.1f} {'-':>14s} {'-':>8s}")
        else:
            print(f"{label:42s} {py:12.1f} {comp:14.1f} {py / comp:7.2f}x")


if __name__ == "__main__":
    main()
