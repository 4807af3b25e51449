"""Hot loops with a compiled backend and a numpy fallback.

The compiled extension ``headpose._ckernels`` is used when it was built
at install time; otherwise the numpy versions in ``_pykernels`` are used.
Both produce identical results up to floating-point rounding of the last
bit (bit-identical for the warp on the platforms we test).
"""

from __future__ import annotations

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

HAVE_COMPILED = _ckernels is not None
_backend = _ckernels if HAVE_COMPILED else _pykernels


def backend() -> str:
    return "compiled" if _backend is _ckernels else "python"


def use_backend(name: str) -> None:
    """Select ``"compiled"`` or ``"python"`` for subsequent calls."""
    global _backend
    if name == "python":
        _backend = _pykernels
    elif name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernels are not available")
        _backend = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")


def warp_bilinear(img, inverse, out_h: int, out_w: int) -> np.ndarray:
    """Resample ``img`` at ``inverse @ (col, row, 1)`` for every output pixel.

    Reads outside the source are clamped to the edge; values are rounded
    half-up to uint8.
    """
    img = np.ascontiguousarray(img, dtype=np.uint8)
    inverse = np.ascontiguousarray(inverse, dtype=np.float64)
    if img.ndim != 2 or inverse.shape != (2, 3):
        raise ValueError("expected a 2D image and a 2x3 map")
    return _backend.warp_bilinear(img, inverse, int(out_h), int(out_w))


def geodesic_angles(a, b) -> np.ndarray:
    """Rotation angles (radians) between paired unit quaternions (N, 4)."""
    a = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    b = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    return _backend.geodesic_angles(np.ascontiguousarray(a), np.ascontiguousarray(b))
