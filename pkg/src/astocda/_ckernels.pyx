# cython: language_level=3
"""Compiled hot kernels: batched radix-2 FFT rows, im2col and col2im.

Signatures mirror ``astocda._pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI

cnp.import_array()


cdef inline Py_ssize_t _log2(Py_ssize_t n):
    cdef Py_ssize_t b = 0
    while (1 << b) < n:
        b += 1
    return b


def fft_rows(x, bint inverse):
    """Unnormalized radix-2 DIT transform along the last axis of a 2D complex array."""
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] src = np.ascontiguousarray(x, dtype=np.complex128)
    cdef Py_ssize_t b = src.shape[0]
    cdef Py_ssize_t n = src.shape[1]
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] out = np.empty((b, n), dtype=np.complex128)
    cdef double[:, ::1] o = out.view(np.float64)
    cdef double[:, ::1] s = src.view(np.float64)
    cdef Py_ssize_t bits = _log2(n)
    cdef Py_ssize_t r, i, j, k, rev, m, half, start, step
    cdef double sign = 1.0 if inverse else -1.0
    cdef double[::1] twr = np.empty(max(n // 2, 1), dtype=np.float64)
    cdef double[::1] twi = np.empty(max(n // 2, 1), dtype=np.float64)
    cdef double ur, ui, vr, vi, wr, wi

    for k in range(n // 2):
        twr[k] = cos(2.0 * M_PI * k / n)
        twi[k] = sign * sin(2.0 * M_PI * k / n)

    for r in range(b):
        for i in range(n):
            rev = 0
            j = i
            for k in range(bits):
                rev = (rev << 1) | (j & 1)
                j >>= 1
            o[r, 2 * rev] = s[r, 2 * i]
            o[r, 2 * rev + 1] = s[r, 2 * i + 1]
        m = 2
        while m <= n:
            half = m // 2
            step = n // m
            start = 0
            while start < n:
                for k in range(half):
                    wr = twr[k * step]
                    wi = twi[k * step]
                    i = start + k
                    j = i + half
                    ur = o[r, 2 * i]
                    ui = o[r, 2 * i + 1]
                    vr = o[r, 2 * j] * wr - o[r, 2 * j + 1] * wi
                    vi = o[r, 2 * j] * wi + o[r, 2 * j + 1] * wr
                    o[r, 2 * i] = ur + vr
                    o[r, 2 * i + 1] = ui + vi
                    o[r, 2 * j] = ur - vr
                    o[r, 2 * j + 1] = ui - vi
                start += m
            m *= 2
    return out


def im2col(x, int kh, int kw, int stride, int pad):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw) patch matrix with zero padding."""
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t ksz = c * kh * kw
    cols = np.empty((n * oh * ow, ksz), dtype=np.float64)
    cdef double[:, ::1] cv = cols
    cdef Py_ssize_t b, oy, ox, ch, i, j, iy, ix, row, col
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                cv[row, col] = xv[b, ch, iy, ix]
                            else:
                                cv[row, col] = 0.0
                            col += 1
    return cols


def col2im(cols, int n, int c, int h, int w, int kh, int kw, int stride, int pad):
    """Adjoint of :func:`im2col`."""
    cdef double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, oy, ox, ch, i, j, iy, ix, row, col
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                ov[b, ch, iy, ix] += cv[row, col]
                            col += 1
    return out
