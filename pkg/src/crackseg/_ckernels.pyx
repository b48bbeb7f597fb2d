# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for threshold sweeps and box filtering.

Mirrors ``_pykernels`` operation for operation; the two are expected to
agree bit-for-bit on float64 input.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _count_le(const double[::1] grid, double v) noexcept nogil:
    # number of grid entries <= v (grid sorted ascending)
    cdef Py_ssize_t lo = 0, hi = grid.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if grid[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


def sweep_counts(prob, gt, grid):
    cdef const double[::1] p = np.ascontiguousarray(prob, dtype=np.float64).ravel()
    cdef const cnp.uint8_t[::1] t = np.ascontiguousarray(gt, dtype=np.uint8).ravel()
    cdef const double[::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], m = g.shape[0], i, k
    if t.shape[0] != n:
        raise ValueError(f"prob has {n} pixels but gt has {t.shape[0]}")
    hist = np.zeros((m + 1, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] h = hist
    with nogil:
        for i in range(n):
            k = _count_le(g, p[i])
            h[k, 1 if t[i] else 0] += 1

    out = np.empty((m, 4), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef cnp.int64_t pos = 0, neg = 0, tp = 0, fp = 0
    for k in range(m + 1):
        neg += h[k, 0]
        pos += h[k, 1]
    # walk thresholds from the top: pixels with k > j are predicted crack at j
    for k in range(m - 1, -1, -1):
        tp += h[k + 1, 1]
        fp += h[k + 1, 0]
        o[k, 0] = tp
        o[k, 1] = fp
        o[k, 2] = pos - tp
        o[k, 3] = neg - fp
    return out


cdef void _window_sums_rows(double[:, ::1] src, double[:, ::1] dst, Py_ssize_t r) noexcept nogil:
    # src is edge-padded by r on the column axis; dst has the unpadded width
    cdef Py_ssize_t rows = dst.shape[0], cols = dst.shape[1], width = 2 * r + 1
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(rows):
        acc = 0.0
        # running prefix sums; window = prefix[j + width] - prefix[j]
        for j in range(cols + 2 * r):
            acc = acc + src[i, j]
            src[i, j] = acc
        for j in range(cols):
            if j == 0:
                dst[i, j] = src[i, width - 1]
            else:
                dst[i, j] = src[i, j + width - 1] - src[i, j - 1]


def box_mean(arr, Py_ssize_t radius):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("box_mean expects a 2-D array")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return a.copy()
    cdef Py_ssize_t r = radius, H = a.shape[0], W = a.shape[1]
    padded = np.pad(a, r, mode="edge")
    cdef double[:, ::1] pr = np.ascontiguousarray(padded)
    horiz = np.empty((H + 2 * r, W), dtype=np.float64)
    cdef double[:, ::1] hz = horiz
    _window_sums_rows(pr, hz, r)
    vt = np.ascontiguousarray(horiz.T)
    vert = np.empty((W, H), dtype=np.float64)
    cdef double[:, ::1] vtv = vt
    cdef double[:, ::1] vv = vert
    _window_sums_rows(vtv, vv, r)
    area = float((2 * r + 1) * (2 * r + 1))
    return vert.T / area
