"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 5]

Both backends are imported directly, so the comparison does not depend on
which one ``crackseg.kernels`` picked.
"""
import argparse
import timeit

import numpy as np

from crackseg import _pykernels
from crackseg.evalkit import threshold_grid

try:
    from crackseg import _ckernels
except ImportError:
    _ckernels = None


def _best(stmt, repeat, number):
    return min(timeit.repeat(stmt, repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=10)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    prob = rng.random((args.size, args.size))
    gt = (rng.random((args.size, args.size)) < 0.05).astype(np.uint8)
    grid = threshold_grid()
    cases = [
        ("sweep_counts", lambda mod: (lambda: mod.sweep_counts(prob, gt, grid))),
        ("box_mean r=4", lambda mod: (lambda: mod.box_mean(prob, 4))),
        ("box_mean r=16", lambda mod: (lambda: mod.box_mean(prob, 16))),
    ]
    if _ckernels is None:
        print("compiled extension not built; timing numpy backend only")
    print(f"{'kernel':<16}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, make in cases:
        py = _best(make(_pykernels), args.repeat, args.number) * 1e3
        if _ckernels is None:
            print(f"{name:<16}{py:>12.3f}{'-':>12}{'-':>10}")
            continue
        cy = _best(make(_ckernels), args.repeat, args.number) * 1e3
        ref, got = make(_pykernels)(), make(_ckernels)()
        assert np.array_equal(ref, got), f"{name}: backends disagree"
        print(f"{name:<16}{py:>12.3f}{cy:>12.3f}{py / cy:>9.2f}x")


if __name__ == "__main__":
    main()
