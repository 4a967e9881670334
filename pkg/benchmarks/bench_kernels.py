"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times the three hot kernels (row FFT, im2col, col2im) at the shapes used by
the default pipeline, checks that both backends agree, and prints one line
per kernel with the speedup of the compiled backend.
"""

import argparse
import timeit

import numpy as np

from astocda import kernels


def cases(rng):
    # one batch of AST_dn spectra: 32 samples x 96 channels x 16 rows of length 16
    x = rng.standard_normal((32 * 96 * 16, 16)) + 1j * rng.standard_normal((32 * 96 * 16, 16))
    img = rng.standard_normal((4, 32, 16, 16))
    cols_shape = kernels.get_backend("python").im2col(img, 3, 3, 1, 1).shape
    cols = rng.standard_normal(cols_shape)
    return {
        "fft_rows (32x96x16x16)": lambda b: b.fft_rows(x, False),
        "im2col (4x32x16x16, 3x3)": lambda b: b.im2col(img, 3, 3, 1, 1),
        "col2im (4x32x16x16, 3x3)": lambda b: b.col2im(cols, 4, 32, 16, 16, 3, 3, 1, 1),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (active: {kernels.BACKEND})")
    rng = np.random.default_rng(0)
    for name, fn in cases(rng).items():
        ref = fn(kernels.get_backend("python"))
        times = {}
        for b in backends:
            mod = kernels.get_backend(b)
            out = fn(mod)
            err = float(np.max(np.abs(np.asarray(out) - np.asarray(ref))))
            t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
            times[b] = t
            print(f"{name:28s} {b:7s} {t * 1e3:8.3f} ms  max|diff| {err:.2e}")
        if "cython" in times:
            print(f"{name:28s} speedup {times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
