# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Operation order per output element matches the numpy fallback exactly.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_padded(const double[:, :, ::1] xp, const double[:, :, :, ::1] w):
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t h = xp.shape[1] - k + 1, wd = xp.shape[2] - k + 1
    out_arr = np.zeros((cout, h, wd))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t co, ci, ky, kx, y, x
    cdef double wv
    for co in range(cout):
        for ci in range(cin):
            for ky in range(k):
                for kx in range(k):
                    wv = w[co, ci, ky, kx]
                    for y in range(h):
                        for x in range(wd):
                            out[co, y, x] = out[co, y, x] + wv * xp[ci, y + ky, x + kx]
    return out_arr


def fft_rows(re, im, const double[::1] tw_re, const double[::1] tw_im):
    cdef Py_ssize_t rows = re.shape[0], n = re.shape[1]
    cdef Py_ssize_t bits = n.bit_length() - 1
    ar_arr = np.empty((rows, n))
    ai_arr = np.empty((rows, n))
    cdef double[:, ::1] ar = ar_arr
    cdef double[:, ::1] ai = ai_arr
    cdef const double[:, :] sr = re
    cdef const double[:, :] si = im
    cdef Py_ssize_t r, i, j, b, rv, size, half, step, s, p, q
    cdef double wr, wi, xr, xi, vr, vi, ur, ui
    for i in range(n):
        rv = 0
        for b in range(bits):
            rv |= ((i >> b) & 1) << (bits - 1 - b)
        for r in range(rows):
            ar[r, i] = sr[r, rv]
            ai[r, i] = si[r, rv]
    size = 2
    while size <= n:
        half = size // 2
        step = n // size
        for r in range(rows):
            s = 0
            while s < n:
                for j in range(half):
                    wr = tw_re[j * step]
                    wi = tw_im[j * step]
                    p = s + j
                    q = p + half
                    xr = ar[r, q]
                    xi = ai[r, q]
                    vr = xr * wr - xi * wi
                    vi = xr * wi + xi * wr
                    ur = ar[r, p]
                    ui = ai[r, p]
                    ar[r, p] = ur + vr
                    ai[r, p] = ui + vi
                    ar[r, q] = ur - vr
                    ai[r, q] = ui - vi
                s += size
        size *= 2
    return ar_arr, ai_arr
