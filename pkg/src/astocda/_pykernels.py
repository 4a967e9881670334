"""Pure numpy implementations of the hot kernels.

Same signatures as the compiled ``_ckernels`` module; selected by
``astocda.kernels`` when the extension is missing or disabled.
"""

import numpy as np

_bitrev_cache = {}
_twiddle_cache = {}


def _bitrev(n):
    rev = _bitrev_cache.get(n)
    if rev is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            rev |= ((idx >> b) & 1) << (bits - 1 - b)
        _bitrev_cache[n] = rev
    return rev


def _twiddles(n, inverse):
    key = (n, inverse)
    tw = _twiddle_cache.get(key)
    if tw is None:
        sign = 1.0 if inverse else -1.0
        k = np.arange(n // 2)
        tw = np.exp(sign * 2j * np.pi * k / n)
        _twiddle_cache[key] = tw
    return tw


def fft_rows(x, inverse):
    """Unnormalized radix-2 DIT transform along the last axis of a 2D complex array.

    ``inverse`` flips the twiddle sign; no 1/n scaling is applied.
    """
    x = np.ascontiguousarray(x, dtype=np.complex128)
    b, n = x.shape
    out = x[:, _bitrev(n)]
    tw_full = _twiddles(n, inverse)
    m = 2
    while m <= n:
        half = m // 2
        tw = tw_full[:: n // m][:half]
        blocks = out.reshape(b, n // m, m)
        top = blocks[:, :, :half].copy()
        bot = blocks[:, :, half:] * tw
        blocks[:, :, :half] = top + bot
        blocks[:, :, half:] = top - bot
        m *= 2
    return out


def im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, C, H, W)."""
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)
