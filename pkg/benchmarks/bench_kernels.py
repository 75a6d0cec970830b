"""Compiled vs numpy kernels, and fast vs reference metaplectic paths.

Usage: python3 benchmarks/bench_kernels.py [--N 4096] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from oscillab import kernels, metaengine as me, sl2core


def time_call(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(N, repeat):
    rng = np.random.default_rng(0)
    x = np.linspace(-10, 10, N)
    y = np.linspace(-9, 9, N)
    v = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    u = np.linspace(-9.5, 9.5, N // 2)
    cases = {
        "quadratic_phase_sum": lambda m: m.quadratic_phase_sum(x, y, v, 0.3, -0.7, 0.2),
        "sinc_resample": lambda m: m.sinc_resample(float(x[0]), float(x[1] - x[0]), v, u),
        "hermite_table": lambda m: m.hermite_table(x, 64),
    }
    impls = kernels.backends()
    rows = []
    for name, call in cases.items():
        times = {b: time_call(lambda m=m: call(m), repeat) for b, m in impls.items()}
        outs = {b: np.asarray(call(m)) for b, m in impls.items()}
        diff = float(np.abs(outs["python"] - outs.get("cython", outs["python"])).max())
        rows.append((name, times, diff))
    return rows


def bench_paths(N, repeat):
    psi = me.gaussian(0.7 + 0.2j, N)
    A = sl2core.random_sl2(np.random.default_rng(1), 4.0)
    fast = time_call(lambda: me.apply_meta(A, psi, "fast"), repeat)
    ref = time_call(lambda: me.apply_meta(A, psi, "reference"), max(1, repeat // 2))
    return fast, ref


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':22s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, times, diff in bench_kernels(args.N, args.repeat):
        py = times["python"] * 1e3
        cy = times.get("cython")
        if cy is None:
            print(f"{name:22s} {py:12.2f} {'n/a':>12s} {'n/a':>8s} {'n/a':>10s}")
        else:
            print(f"{name:22s} {py:12.2f} {cy * 1e3:12.2f} {py / (cy * 1e3):8.1f} {diff:10.2e}")
    fast, ref = bench_paths(args.N, args.repeat)
    print(f"apply_meta N={args.N}: fast {fast * 1e3:.2f} ms, reference {ref * 1e3:.2f} ms, ratio {ref / fast:.0f}x")


if __name__ == "__main__":
    main()
