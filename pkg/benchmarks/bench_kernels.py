"""Compare the compiled popcount kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the result does not depend on
``BNF_PURE_PYTHON``. Each case also checks that the two outputs agree.
"""

import argparse
import timeit

import numpy as np

from bnf import _kernels_py
from bnf.bitplane import pack_bits

try:
    from bnf import _kernels as compiled
except ImportError:
    compiled = None

# (label, N, H, W, input channels, kernel, filters)
CASES = [
    ("pamap2 dbi first layer", 64, 7, 100, 8, (1, 3), 24),
    ("pamap2 bil 1x1 stage", 64, 7, 100, 8, (1, 1), 64),
    ("pamap2 second conv", 64, 7, 50, 24, (1, 3), 32),
    ("svhn-like 3x3, 128 ch", 8, 20, 20, 128, (3, 3), 128),
]


def make_case(rng, n, h, w, c, kernel, filters):
    x = pack_bits(rng.integers(0, 2, (n, h, w, c), dtype=np.uint8))
    wt = pack_bits(rng.integers(0, 2, kernel + (filters, c), dtype=np.uint8))
    top, left = (kernel[0] - 1) // 2, (kernel[1] - 1) // 2
    return x, wt, top, left


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'case':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for label, *dims in CASES:
        x, wt, top, left = make_case(rng, *dims)
        ref = _kernels_py.packed_conv(x, wt, top, left)
        t_np = best_of(lambda: _kernels_py.packed_conv(x, wt, top, left), args.repeat)
        if compiled is None:
            print(f"{label:<26}{t_np * 1e3:>10.2f}{'-':>11}{'-':>9}")
            continue
        if not np.array_equal(compiled.packed_conv(x, wt, top, left), ref):
            raise SystemExit(f"{label}: backends disagree")
        t_c = best_of(lambda: compiled.packed_conv(x, wt, top, left), args.repeat)
        print(f"{label:<26}{t_np * 1e3:>10.2f}{t_c * 1e3:>11.2f}{t_np / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
