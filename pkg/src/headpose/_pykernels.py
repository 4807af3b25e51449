"""Numpy implementations of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np

from .geometry import geodesic_error


def warp_bilinear(img, inv, out_h, out_w):
    h, w = img.shape
    r, c = np.mgrid[0:out_h, 0:out_w].astype(float)
    sx = inv[0, 0] * c + inv[0, 1] * r + inv[0, 2]
    sy = inv[1, 0] * c + inv[1, 1] * r + inv[1, 2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    src = img.astype(float)
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    val = np.floor(top * (1.0 - fy) + bot * fy + 0.5)
    return np.clip(val, 0.0, 255.0).astype(np.uint8)


def geodesic_angles(a, b):
    return geodesic_error(a, b)
