"""Reference numpy implementations of the hot kernels."""

import math

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erf


def accumulate_psf(image, xs, ys, flux, sigma, x0, y0, pixel, cutoff=7.0):
    """Add pixel-integrated isotropic Gaussians to ``image`` in place.

    Pixel ``(r, c)`` covers ``[x0 + c*pixel, x0 + (c+1)*pixel)`` in x and the
    same in y with ``y0`` and ``r``. Each spot is truncated at ``cutoff`` sigma.
    """
    H, W = image.shape
    inv = 1.0 / (math.sqrt(2.0) * sigma)
    reach = cutoff * sigma
    for x, y, f in zip(xs, ys, flux):
        if f == 0.0:
            continue
        c_lo = max(int(math.floor((x - reach - x0) / pixel)), 0)
        c_hi = min(int(math.floor((x + reach - x0) / pixel)), W - 1)
        r_lo = max(int(math.floor((y - reach - y0) / pixel)), 0)
        r_hi = min(int(math.floor((y + reach - y0) / pixel)), H - 1)
        if c_lo > c_hi or r_lo > r_hi:
            continue
        ec = erf((x0 + np.arange(c_lo, c_hi + 2) * pixel - x) * inv)
        er = erf((y0 + np.arange(r_lo, r_hi + 2) * pixel - y) * inv)
        ex = 0.5 * np.diff(ec)
        ey = 0.5 * np.diff(er)
        image[r_lo:r_hi + 1, c_lo:c_hi + 1] += (f * ey)[:, None] * ex[None, :]


def pairs_within(x, y, rmax):
    """Unordered pairs (i < j) with distance <= rmax, sorted by (i, j)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, float)
    tree = cKDTree(np.column_stack([x, y]))
    pairs = tree.query_pairs(rmax * (1 + 1e-12), output_type="ndarray").astype(np.int64)
    if len(pairs) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, float)
    i, j = pairs[:, 0], pairs[:, 1]
    d = np.sqrt((x[i] - x[j]) ** 2 + (y[i] - y[j]) ** 2)
    keep = d <= rmax
    i, j, d = i[keep], j[keep], d[keep]
    s = np.lexsort((j, i))
    return i[s], j[s], d[s]
