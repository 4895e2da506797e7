# cython: boundscheck=False, wraparound=False, cdivision=True, nonecheck=False
"""Compiled kernels; see _kernels_py.py for the reference implementations."""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, floor, sqrt
from libcpp.vector cimport vector

cnp.import_array()


def accumulate_psf(double[:, ::1] image, const double[::1] xs, const double[::1] ys,
                   const double[::1] flux, double sigma, double x0, double y0,
                   double pixel, double cutoff=7.0):
    cdef Py_ssize_t H = image.shape[0], W = image.shape[1], n = xs.shape[0]
    cdef Py_ssize_t k, r, c, c_lo, c_hi, r_lo, r_hi
    cdef double inv = 1.0 / (sqrt(2.0) * sigma), reach = cutoff * sigma
    cdef double x, y, f, a, b, wy
    cdef vector[double] ex, ey
    ex.resize(W)
    ey.resize(H)
    with nogil:
        for k in range(n):
            f = flux[k]
            if f == 0.0:
                continue
            x = xs[k]
            y = ys[k]
            c_lo = <Py_ssize_t>floor((x - reach - x0) / pixel)
            c_hi = <Py_ssize_t>floor((x + reach - x0) / pixel)
            r_lo = <Py_ssize_t>floor((y - reach - y0) / pixel)
            r_hi = <Py_ssize_t>floor((y + reach - y0) / pixel)
            if c_lo < 0:
                c_lo = 0
            if r_lo < 0:
                r_lo = 0
            if c_hi > W - 1:
                c_hi = W - 1
            if r_hi > H - 1:
                r_hi = H - 1
            if c_lo > c_hi or r_lo > r_hi:
                continue
            for c in range(c_lo, c_hi + 1):
                a = erf((x0 + c * pixel - x) * inv)
                b = erf((x0 + (c + 1) * pixel - x) * inv)
                ex[c] = 0.5 * (b - a)
            for r in range(r_lo, r_hi + 1):
                a = erf((y0 + r * pixel - y) * inv)
                b = erf((y0 + (r + 1) * pixel - y) * inv)
                ey[r] = 0.5 * (b - a)
            for r in range(r_lo, r_hi + 1):
                wy = f * ey[r]
                for c in range(c_lo, c_hi + 1):
                    image[r, c] += wy * ex[c]


def pairs_within(const double[::1] x, const double[::1] y, double rmax):
    """Unordered pairs (i < j) with distance <= rmax, sorted by (i, j)."""
    cdef Py_ssize_t n = x.shape[0]
    if n < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, float)
    xa = np.asarray(x)
    ya = np.asarray(y)
    cell = rmax if rmax > 0 else 1.0
    cx_arr = np.floor((xa - xa.min()) / cell).astype(np.int64)
    cy_arr = np.floor((ya - ya.min()) / cell).astype(np.int64)
    cdef long long ncx = cx_arr.max() + 3
    key_arr = (cy_arr + 1) * ncx + (cx_arr + 1)
    order_arr = np.argsort(key_arr, kind="stable")
    skey_arr = np.ascontiguousarray(key_arr[order_arr])
    cdef const long long[::1] cx = cx_arr
    cdef const long long[::1] cy = cy_arr
    cdef const long long[::1] skey = skey_arr
    cdef const long long[::1] order = order_arr.astype(np.int64)
    cdef vector[long long] oi, oj
    cdef vector[double] od
    cdef Py_ssize_t i, j, lo, hi, mid, p
    cdef long long target
    cdef int dx, dy
    cdef double ddx, ddy, d2, r2 = rmax * rmax
    with nogil:
        for i in range(n):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    target = (cy[i] + 1 + dy) * ncx + (cx[i] + 1 + dx)
                    lo = 0
                    hi = n
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if skey[mid] < target:
                            lo = mid + 1
                        else:
                            hi = mid
                    p = lo
                    while p < n and skey[p] == target:
                        j = order[p]
                        if j > i:
                            ddx = x[i] - x[j]
                            ddy = y[i] - y[j]
                            d2 = ddx * ddx + ddy * ddy
                            if d2 <= r2:
                                oi.push_back(i)
                                oj.push_back(j)
                                od.push_back(sqrt(d2))
                        p += 1
    m = oi.size()
    ii = np.empty(m, np.int64)
    jj = np.empty(m, np.int64)
    dd = np.empty(m, float)
    cdef long long[::1] iv = ii
    cdef long long[::1] jv = jj
    cdef double[::1] dv = dd
    for p in range(<Py_ssize_t>m):
        iv[p] = oi[p]
        jv[p] = oj[p]
        dv[p] = od[p]
    s = np.lexsort((jj, ii))
    return ii[s], jj[s], dd[s]
