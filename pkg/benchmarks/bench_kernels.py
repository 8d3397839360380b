"""Compare the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on identical inputs with both backends; outputs are
checked for agreement before the timings are reported.
"""
import argparse
import sys
import timeit

import numpy as np

from lqstab._backend import compiled_kernels, python_kernels


def _simulate_inputs(p, n, seed=0):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((p, p))
    D *= 0.95 / max(abs(np.linalg.eigvals(D)))
    return (np.ascontiguousarray(D), np.ones(p), np.ascontiguousarray(rng.standard_normal((n, p))),
            1e300)


def _riccati_inputs(p, r, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p, p))
    A *= 1.1 / max(abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((p, r))
    return (np.ascontiguousarray(A), np.ascontiguousarray(B), np.eye(p), np.eye(r),
            np.zeros((p, p)), 1e-12, 100000)


CASES = [
    ("simulate p=2 n=100000", "simulate_closed_loop", _simulate_inputs(2, 100_000)),
    ("simulate p=8 n=20000", "simulate_closed_loop", _simulate_inputs(8, 20_000)),
    ("riccati p=2 r=1", "riccati_iterate", _riccati_inputs(2, 1)),
    ("riccati p=6 r=3", "riccati_iterate", _riccati_inputs(6, 3)),
]


def _first_array(result):
    return np.asarray(result[0] if isinstance(result, tuple) else result)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is kept)")
    args = parser.parse_args(argv)
    if compiled_kernels is None:
        print("compiled kernels are not built; run: pip install -e . --no-build-isolation")
        return 1
    print(f"{'case':<24} {'python [s]':>12} {'compiled [s]':>13} {'speedup':>9}")
    for label, name, inputs in CASES:
        fast, slow = getattr(compiled_kernels, name), getattr(python_kernels, name)
        if not np.allclose(_first_array(fast(*inputs)), _first_array(slow(*inputs)),
                           rtol=1e-9, atol=1e-9):
            print(f"{label}: backends disagree")
            return 1
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat))
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat))
        print(f"{label:<24} {t_slow:12.4f} {t_fast:13.4f} {t_slow / t_fast:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
