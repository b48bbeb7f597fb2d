"""Numpy implementations of the compiled kernels.

Used when the Cython extension is not built, and as the reference side
in the kernel benchmark.
"""
import numpy as np


def sweep_counts(prob, gt, grid):
    """Confusion counts of ``prob >= m`` against ``gt`` for every ``m`` in ``grid``.

    Returns an int64 array of shape ``(len(grid), 4)`` with columns
    ``tp, fp, fn, tn``. ``grid`` must be sorted ascending.
    """
    p = np.ascontiguousarray(prob, dtype=np.float64).ravel()
    t = np.ascontiguousarray(gt, dtype=np.uint8).ravel()
    g = np.ascontiguousarray(grid, dtype=np.float64)
    if t.shape[0] != p.shape[0]:
        raise ValueError(f"prob has {p.shape[0]} pixels but gt has {t.shape[0]}")
    m = g.shape[0]
    k = np.searchsorted(g, p, side="right")
    crack = t != 0
    hist_pos = np.bincount(k[crack], minlength=m + 1)
    hist_neg = np.bincount(k[~crack], minlength=m + 1)
    # pixels with k > j are predicted crack at threshold j
    tp = np.cumsum(hist_pos[::-1])[::-1][1:]
    fp = np.cumsum(hist_neg[::-1])[::-1][1:]
    out = np.empty((m, 4), dtype=np.int64)
    out[:, 0] = tp
    out[:, 1] = fp
    out[:, 2] = hist_pos.sum() - tp
    out[:, 3] = hist_neg.sum() - fp
    return out


def _window_sums_rows(src, r):
    width = 2 * r + 1
    cs = np.cumsum(src, axis=1)
    cols = src.shape[1] - 2 * r
    dst = np.empty((src.shape[0], cols), dtype=np.float64)
    dst[:, 0] = cs[:, width - 1]
    dst[:, 1:] = cs[:, width:] - cs[:, : cols - 1]
    return dst


def box_mean(arr, radius):
    """Mean over ``(2r+1)^2`` windows with edge-replicating borders."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("box_mean expects a 2-D array")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return a.copy()
    r = int(radius)
    padded = np.pad(a, r, mode="edge")
    horiz = _window_sums_rows(padded, r)
    vert = _window_sums_rows(np.ascontiguousarray(horiz.T), r)
    area = float((2 * r + 1) * (2 * r + 1))
    return vert.T / area
