"""2D Fourier analysis of feature planes.

Conventions: forward transform unnormalized, inverse scaled by 1/(H*W), no
fftshift. Index (u, v) mirrors to ((H-u) mod H, (W-v) mod W). All functions
operate on the last two axes and accept any number of leading batch axes.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigurationError, SymmetryError
from .tensor import Tensor, as_tensor, clamp_min, make_op

EPS_MAG = 1e-12
IMAG_TOL = 1e-6
SYM_TOL = 1e-8


@dataclass
class Spectrum:
    amplitude: Tensor
    phase: Tensor

    @property
    def height(self):
        return self.amplitude.shape[-2]

    @property
    def width(self):
        return self.amplitude.shape[-1]


@dataclass
class HalfSpectrumVector:
    values: Tensor
    height: int
    width: int


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def check_dims(h, w):
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ConfigurationError(f"spectral planes must be powers of two, got {h}x{w}")


def _fft_last(x, inverse):
    shape = x.shape
    return kernels.fft_rows(x.reshape(-1, shape[-1]), inverse).reshape(shape)


def fft2c(x, inverse=False):
    """Unnormalized 2D transform of a complex array over its last two axes."""
    y = _fft_last(np.asarray(x, dtype=np.complex128), inverse)
    y = np.swapaxes(y, -1, -2)
    y = _fft_last(np.ascontiguousarray(y), inverse)
    return np.ascontiguousarray(np.swapaxes(y, -1, -2))


def mirror(a):
    """a[..., (H-u) % H, (W-v) % W]."""
    h, w = a.shape[-2:]
    iu = (-np.arange(h)) % h
    iv = (-np.arange(w)) % w
    return a[..., iu, :][..., iv]


def hermitian_project(x):
    """0.5 * (X + conj(mirror(X))); exact conjugate symmetry in floating point."""
    return 0.5 * (x + np.conj(mirror(x)))


def fft2(plane):
    """Amplitude and phase of the DFT of a real plane.

    The complex spectrum is projected onto exact conjugate symmetry so the
    amplitude is bitwise mirror-symmetric and the phase mirror-antisymmetric
    (away from the self-mirrored +-pi bins).
    """
    plane = as_tensor(plane)
    h, w = plane.shape[-2:]
    check_dims(h, w)
    spec = hermitian_project(fft2c(plane.data))
    re = spec.real
    im = spec.imag + 0.0  # -0.0 -> +0.0 so the phase stays in (-pi, pi]
    amp = np.hypot(re, im)
    phase = np.arctan2(im, re)

    def back_amp(g):
        nz = amp > 0
        gc = np.where(nz, g / np.where(nz, amp, 1.0), 0.0) * (re + 1j * im)
        return (fft2c(gc, inverse=True).real,)

    def back_phase(g):
        ok = amp >= EPS_MAG
        inv = np.where(ok, g / np.where(ok, amp * amp, 1.0), 0.0)
        gc = inv * (-im + 1j * re)
        return (fft2c(gc, inverse=True).real,)

    return Spectrum(
        make_op(amp, (plane,), back_amp, "fft2_amplitude"),
        make_op(phase, (plane,), back_phase, "fft2_phase"),
    )


def recombine(amplitude, phase):
    amplitude, phase = as_tensor(amplitude), as_tensor(phase)
    if amplitude.shape != phase.shape:
        raise ConfigurationError(f"amplitude {amplitude.shape} and phase {phase.shape} differ")
    return Spectrum(clamp_min(amplitude, 0.0), phase)


def ifft2(spec):
    """Real inverse transform of a conjugate-symmetric spectrum.

    Raises SymmetryError when the imaginary residue reaches IMAG_TOL.
    """
    a, p = spec.amplitude, spec.phase
    h, w = a.shape[-2:]
    check_dims(h, w)
    cos, sin = np.cos(p.data), np.sin(p.data)
    x = a.data * cos + 1j * (a.data * sin)
    y = fft2c(x, inverse=True) / (h * w)
    residue = np.abs(y.imag).max() if y.size else 0.0
    if residue >= IMAG_TOL:
        raise SymmetryError(
            f"inverse transform left imaginary residue {residue:.3g} >= {IMAG_TOL:g}; "
            "the amplitude/phase pair is not conjugate-symmetric"
        )
    ad = a.data

    def back(g):
        gx = fft2c(g) / (h * w)
        gr, gi = gx.real, gx.imag
        return gr * cos + gi * sin, ad * (gi * cos - gr * sin)

    return make_op(np.ascontiguousarray(y.real), (a, p), back, "ifft2")


def symmetry_error(a):
    a = np.asarray(a)
    return float(np.abs(a - mirror(a)).max()) if a.size else 0.0


def is_conjugate_symmetric(a, tol=SYM_TOL):
    a = np.asarray(a)
    scale = max(1.0, float(np.abs(a).max())) if a.size else 1.0
    return symmetry_error(a) <= tol * scale


def half_length(h, w):
    return h * (w // 2 + 1)


def vectorize_T(amplitude, tol=SYM_TOL):
    """Keep columns v in [0, W/2] (all rows) of a mirror-symmetric amplitude plane."""
    amplitude = as_tensor(amplitude)
    h, w = amplitude.shape[-2:]
    check_dims(h, w)
    if not is_conjugate_symmetric(amplitude.data, tol):
        raise SymmetryError(
            f"amplitude is not mirror-symmetric (max deviation {symmetry_error(amplitude.data):.3g})"
        )
    lead = amplitude.shape[:-2]
    half = amplitude[..., : w // 2 + 1]
    return HalfSpectrumVector(half.reshape(lead + (half_length(h, w),)), h, w)


@lru_cache(maxsize=64)
def _mirror_index(h, w):
    hw = w // 2 + 1
    ia = np.empty((h, w), dtype=np.intp)
    ib = np.empty((h, w), dtype=np.intp)
    for u in range(h):
        mu = (h - u) % h
        for v in range(w):
            if v <= w // 2:
                ia[u, v] = u * hw + v
                ib[u, v] = mu * hw + v if v in (0, w // 2) else ia[u, v]
            else:
                ia[u, v] = ib[u, v] = mu * hw + (w - v)
    ia, ib = ia.ravel(), ib.ravel()
    # dense adjoint of out = 0.5 * (vec[ia] + vec[ib])
    adj = np.zeros((h * w, h * hw))
    np.add.at(adj, (np.arange(h * w), ia), 0.5)
    np.add.at(adj, (np.arange(h * w), ib), 0.5)
    for arr in (ia, ib, adj):
        arr.setflags(write=False)
    return ia, ib, adj


def devectorize_Tinv(vec, height=None, width=None):
    """Rebuild a full mirror-symmetric plane from a half-spectrum vector.

    Columns 0 and W/2 are self-mirrored, so their two redundant entries are
    averaged; every output is exactly symmetric, and T^-1(T(A)) == A bitwise
    for symmetric A.
    """
    if isinstance(vec, HalfSpectrumVector):
        values, height, width = vec.values, vec.height, vec.width
    else:
        values = as_tensor(vec)
    h, w = int(height), int(width)
    check_dims(h, w)
    if values.shape[-1] != half_length(h, w):
        raise ConfigurationError(
            f"half-spectrum length {values.shape[-1]} != {h}*({w}//2+1) = {half_length(h, w)}"
        )
    ia, ib, adj = _mirror_index(h, w)
    lead = values.shape[:-1]
    d = values.data
    full = 0.5 * (d[..., ia] + d[..., ib])
    return make_op(
        full.reshape(lead + (h, w)),
        (values,),
        lambda g: (g.reshape(lead + (h * w,)) @ adj,),
        "devectorize",
    )


@lru_cache(maxsize=64)
def _freq_resample_matrix(n_in, n_out):
    """(n_out, n_in) map between DFT grids at equal cycles-per-plane.

    Output bin with signed frequency f reads the input bin with the same f;
    frequencies beyond the input Nyquist read zero; Nyquist bins split
    evenly between +-f so the map commutes with the modular mirror.
    """
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        m[np.arange(n_in), np.arange(n_in)] = 1.0
    else:
        for i in range(n_out):
            f = i if i < (n_out + 1) // 2 else i - n_out
            if n_out % 2 == 0 and i == n_out // 2 and n_out < n_in:
                m[i, n_out // 2] += 0.5
                m[i, (n_in - n_out // 2) % n_in] += 0.5
            elif 2 * abs(f) < n_in:
                m[i, f % n_in] = 1.0
            elif 2 * abs(f) == n_in:
                m[i, n_in // 2] = 0.5
    m.setflags(write=False)
    return m


def spectral_resize(amplitude, out_h, out_w):
    """Carry an amplitude plane between grid sizes, keeping mirror symmetry.

    Bins are matched by signed frequency (cycles per plane) and rescaled by the
    area ratio, which is how the unnormalized DFT of a spatially resized plane
    relates to the original.
    """
    amplitude = as_tensor(amplitude)
    h, w = amplitude.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_op(amplitude.data.copy(), (amplitude,), lambda g: (g,), "spectral_resize")
    mh = _freq_resample_matrix(h, out_h)
    mw = _freq_resample_matrix(w, out_w)
    scale = (out_h * out_w) / (h * w)
    out = scale * np.matmul(np.matmul(mh, amplitude.data), mw.T)
    return make_op(
        out,
        (amplitude,),
        lambda g: (scale * np.matmul(np.matmul(mh.T, g), mw),),
        "spectral_resize",
    )
