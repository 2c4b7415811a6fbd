"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import sys
import timeit

import numpy as np

from relconv import kernels


def cases(rng):
    z = rng.normal(size=(4096, 84))
    p = kernels.sparsemax_rows(z)
    g = rng.normal(size=z.shape)
    grad = rng.normal(size=(64, 252, 16))
    index = rng.integers(0, 84, size=252)
    hands = rng.integers(0, 3, size=(2000, 5, 4))
    return {
        "sparsemax_rows (4096x84)": lambda: kernels.sparsemax_rows(z),
        "sparsemax_backward (4096x84)": lambda: kernels.sparsemax_backward_rows(p, g),
        "scatter_add (64x252x16 -> 84)": lambda: kernels.scatter_add(grad, index, 84),
        "count_sets (2000 hands of 5)": lambda: kernels.count_sets(hands),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = [b for b in ("numba", "numpy") if b in kernels.IMPLEMENTATIONS]
    rng = np.random.default_rng(0)
    results = {}
    for name in backends:
        with kernels.use_backend(name):
            for label, fn in cases(rng).items():
                fn()  # warm-up, includes numba compilation
                results.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':<32}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for label, row in results.items():
        line = f"{label:<32}" + "".join(f"{row[b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{row['numpy'] / row['numba']:>11.1f}x"
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
