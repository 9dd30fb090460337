"""Time the compiled kernels against the numpy fallback on A1-sized inputs.

    python benchmarks/bench_kernels.py [--P 100000] [--repeat 5]

Prints one line per kernel with the best-of-N wall time for each backend and
the speedup, after checking that both backends agree.
"""
import argparse
import timeit

import numpy as np

from stackop import _pykernels

try:
    from stackop import _ckernels
except ImportError:
    _ckernels = None


def cases(P, M, n):
    rng = np.random.default_rng(0)
    dw = rng.standard_normal((P, M)) * np.sqrt(1.0 / M)
    xi = rng.standard_normal((P, 3))
    tp = rng.standard_normal((n, M))
    ch = rng.standard_normal((n, P))
    u = rng.standard_normal((P, M, 1))
    v = rng.standard_normal((P, M, 1))
    return {
        "haar_wiener": (dw, M // 4, M // 2, 3 * M // 4, 2.0),
        "hermite_chaos": (xi, np.array([3, 2, 1], dtype=np.int_)),
        "gram_separable": (tp, ch, 1.0 / M),
        "pathwise_inner": (u, v, 1.0 / M),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--P", type=int, default=100_000)
    ap.add_argument("--M", type=int, default=256)
    ap.add_argument("--n", type=int, default=16, help="basis elements in the Gram kernel")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"P={args.P} M={args.M} n={args.n}, best of {args.repeat}")
    print(f"{'kernel':<16}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, call_args in cases(args.P, args.M, args.n).items():
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat))
        if _ckernels is None:
            print(f"{name:<16}{1e3 * t_py:>12.2f}{'-':>13}{'-':>9}")
            continue
        cy = getattr(_ckernels, name)
        a, b = py(*call_args), cy(*call_args)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(np.asarray(y), np.asarray(x), rtol=1e-10, atol=1e-12)
        t_cy = min(timeit.repeat(lambda: cy(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<16}{1e3 * t_py:>12.2f}{1e3 * t_cy:>13.2f}{t_py / t_cy:>9.2f}")


if __name__ == "__main__":
    main()
