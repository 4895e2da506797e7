"""Kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``SMFORGE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("SMFORGE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def backends():
    """Available implementations keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def accumulate_psf(image, xs, ys, flux, sigma, x0, y0, pixel, cutoff=7.0):
    import numpy as np

    return _impl.accumulate_psf(
        image,
        np.ascontiguousarray(xs, dtype=float),
        np.ascontiguousarray(ys, dtype=float),
        np.ascontiguousarray(flux, dtype=float),
        float(sigma), float(x0), float(y0), float(pixel), float(cutoff),
    )


def pairs_within(x, y, rmax):
    import numpy as np

    return _impl.pairs_within(np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(y, dtype=float), float(rmax))
