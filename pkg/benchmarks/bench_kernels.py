"""Time the compiled and numpy scoring kernels on a detector-sized stack.

    python3 benchmarks/bench_kernels.py --width 640 --height 480 --branches 5 --radius 9
"""

import argparse
import timeit

import numpy as np

from activedet import kernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=640)
    ap.add_argument("--height", type=int, default=480)
    ap.add_argument("--branches", type=int, default=5)
    ap.add_argument("--radius", type=int, default=9)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    stack = rng.random((args.branches, args.height, args.width)).astype(np.float32)
    results = {}
    for backend in kernels.available():
        def run():
            return [backend.proposed_branch(b, args.radius, False) for b in stack]

        best = min(timeit.repeat(run, number=1, repeat=args.repeat))
        results[backend.BACKEND] = (best, run())
        print(f"{backend.BACKEND:>7}: {best * 1e3:8.1f} ms per {args.branches}x{args.height}x{args.width} stack, r={args.radius}")

    if len(results) == 2:
        (tc, oc), (tp, op) = results["cython"], results["python"]
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(oc, op))
        print(f"speedup: {tp / tc:.2f}x, max |diff| {diff:.2e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
