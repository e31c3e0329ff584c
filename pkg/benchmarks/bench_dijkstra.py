"""Compiled vs pure-Python grid Dijkstra (the Agmon distance kernel).

    python3 benchmarks/bench_dijkstra.py [--sizes 101 201 401] [--repeat 3]
"""
import argparse
import time

import numpy as np

from witten_lab import _kernels_py
from witten_lab.dsl import ScalarField
from witten_lab.geometry import box

try:
    from witten_lab import _kernels
except ImportError:
    _kernels = None


def problem(nodes_per_axis: int):
    R = 3.5
    h = 2 * R / (nodes_per_axis - 1)
    model = box(2, R, h)
    f = ScalarField("x1^3/3 - x1 + x2^2", 2)
    P = model.nodes()
    speed = np.ascontiguousarray(np.linalg.norm(f.grad(P), axis=1))
    src = np.zeros(len(P), dtype=np.uint8)
    src[np.argmin(np.linalg.norm(P - [1.0, 0.0], axis=1))] = 1
    src[np.argmin(np.linalg.norm(P - [-1.0, 0.0], axis=1))] = 1
    return speed, nodes_per_axis, h, src


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[101, 201, 401])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernel not built; only the fallback is timed")
    print(f"{'grid':>10} {'nodes':>8} {'python [s]':>11} {'compiled [s]':>13} {'speedup':>8} {'max |diff|':>11}")
    for n in args.sizes:
        speed, m, h, src = problem(n)
        call = lambda k: k.dijkstra_grid(speed, m, m, h, 9.0, src)  # noqa: E731  (b T = 0.9 * 10)
        tp, dp = best_of(lambda: call(_kernels_py), args.repeat)
        if _kernels is not None:
            tc, dc = best_of(lambda: call(_kernels), args.repeat)
            diff = float(np.max(np.abs(dp - dc)))
            print(f"{n}x{n:<6} {m * m:>8} {tp:>11.4f} {tc:>13.5f} {tp / tc:>7.0f}x {diff:>11.2e}")
        else:
            print(f"{n}x{n:<6} {m * m:>8} {tp:>11.4f} {'-':>13} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
