"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` are used. Set ``ASTOCDA_KERNELS=python``
to force the fallback.
"""

import os

from . import _pykernels

_python = _pykernels
_compiled = None
try:
    from . import _ckernels as _compiled  # type: ignore[no-redef]
except ImportError:  # extension not built
    _compiled = None

_requested = os.environ.get("ASTOCDA_KERNELS", "auto").lower()
if _requested == "python" or _compiled is None:
    _active = _python
    BACKEND = "python"
else:
    _active = _compiled
    BACKEND = "cython"


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name):
    if name == "python":
        return _python
    if name == "cython" and _compiled is not None:
        return _compiled
    raise ValueError(f"kernel backend {name!r} is not available")


def fft_rows(x, inverse=False):
    return _active.fft_rows(x, inverse)


def im2col(x, kh, kw, stride, pad):
    return _active.im2col(x, kh, kw, stride, pad)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    return _active.col2im(cols, n, c, h, w, kh, kw, stride, pad)
