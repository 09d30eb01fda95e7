"""Pure numpy versions of the packed popcount kernels."""

import numpy as np


def packed_dot(x, w) -> int:
    x = np.asarray(x, dtype=np.uint64)
    w = np.asarray(w, dtype=np.uint64)
    if x.shape != w.shape:
        raise ValueError("word arrays differ in length")
    return 2 * int(np.bitwise_count(x & w).sum()) - int(np.bitwise_count(x).sum())


def packed_conv(x, w, pad_top: int, pad_left: int):
    """Integer core of a same-size binary convolution.

    x: uint64 (N, H, W, nw) packed {0,1} input; w: uint64 (kh, kw, I, nw) packed
    positive-sign masks. Returns int64 (N, H, W, I) of ``sum x * (+1|-1)``.
    """
    n, h, wd, nw = x.shape
    kh, kw, n_out, nw2 = w.shape
    if nw != nw2:
        raise ValueError("input and weight word counts differ")
    xp = np.zeros((n, h + kh - 1, wd + kw - 1, nw), dtype=np.uint64)
    xp[:, pad_top:pad_top + h, pad_left:pad_left + wd] = x
    out = np.zeros((n, h, wd, n_out), dtype=np.int64)
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, ky:ky + h, kx:kx + wd, :]
            ones = np.bitwise_count(xs).sum(axis=-1, dtype=np.int64)
            hits = np.bitwise_count(xs[..., None, :] & w[ky, kx]).sum(axis=-1, dtype=np.int64)
            out += 2 * hits - ones[..., None]
    return out
