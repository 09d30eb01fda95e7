# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled packed popcount kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()


cdef extern from *:
    int popcount64 "__builtin_popcountll"(unsigned long long) nogil


def packed_dot(x, w):
    cdef const uint64_t[::1] xv = np.ascontiguousarray(x, dtype=np.uint64)
    cdef const uint64_t[::1] wv = np.ascontiguousarray(w, dtype=np.uint64)
    if xv.shape[0] != wv.shape[0]:
        raise ValueError("word arrays differ in length")
    cdef Py_ssize_t i
    cdef int64_t hits = 0, ones = 0
    with nogil:
        for i in range(xv.shape[0]):
            hits += popcount64(xv[i] & wv[i])
            ones += popcount64(xv[i])
    return 2 * hits - ones


def packed_conv(x, w, int pad_top, int pad_left):
    cdef const uint64_t[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.uint64)
    cdef const uint64_t[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.uint64)
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], nw = xv.shape[3]
    cdef Py_ssize_t kh = wv.shape[0], kw = wv.shape[1], n_out = wv.shape[2]
    if wv.shape[3] != nw:
        raise ValueError("input and weight word counts differ")
    out = np.zeros((n, h, wd, n_out), dtype=np.int64)
    cdef int64_t[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, oy, ox, ky, kx, iy, ix, o, k
    cdef int64_t ones, hits
    cdef uint64_t word
    with nogil:
        for b in range(n):
            for oy in range(h):
                for ox in range(wd):
                    for ky in range(kh):
                        iy = oy + ky - pad_top
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox + kx - pad_left
                            if ix < 0 or ix >= wd:
                                continue
                            ones = 0
                            for k in range(nw):
                                ones += popcount64(xv[b, iy, ix, k])
                            for o in range(n_out):
                                hits = 0
                                for k in range(nw):
                                    hits += popcount64(xv[b, iy, ix, k] & wv[ky, kx, o, k])
                                ov[b, oy, ox, o] += 2 * hits - ones
    return out
