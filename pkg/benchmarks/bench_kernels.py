"""Time the compiled and NumPy scoring kernels on the same inputs.

    python benchmarks/bench_kernels.py --n 20000 --k-max 400 --repeat 3

Prints best-of-``repeat`` wall time per back end and the speed-up, after
checking that both return identical arrays.
"""

import argparse
import time

import numpy as np

from domainshift import kernels
from domainshift.score import tail_table


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000, help="rows to score")
    ap.add_argument("--k-max", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    compiled = kernels.compiled_impl()
    if compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(args.seed)
    table = tail_table(args.k_max, 0.5)
    width = args.k_max + 50

    bits = (rng.random((args.n, args.k_max)) < 0.5).astype(np.uint8)
    pool = 2 * args.n
    nbrs = rng.integers(0, pool, size=(args.n, width)).astype(np.int32)
    rows = np.arange(args.n, dtype=np.int64)
    active = (rng.random(pool) < 0.95).astype(np.uint8)
    is_test = (np.arange(pool) >= args.n).astype(np.uint8)

    cases = {
        "score_bits": lambda impl: kernels.score_bits(bits, table, impl=impl),
        "score_neighbor_rows": lambda impl: kernels.score_neighbor_rows(
            nbrs, rows, active, is_test, table, args.k_max, impl=impl
        ),
    }
    print(f"n={args.n} k_max={args.k_max} best of {args.repeat}")
    print(f"{'kernel':<22}{'python [s]':>12}{'cython [s]':>12}{'speed-up':>10}")
    for name, run in cases.items():
        t_py, out_py = best_of(lambda: run(kernels.python_impl()), args.repeat)
        t_cy, out_cy = best_of(lambda: run(compiled), args.repeat)
        for a, b in zip(out_py, out_cy):
            np.testing.assert_array_equal(a, b)
        print(f"{name:<22}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
