# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay arithmetic-identical to _pykernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, atan2, fabs

cnp.import_array()


def warp_bilinear(const cnp.uint8_t[:, ::1] img, const double[:, ::1] inv, int out_h, int out_w):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.empty((out_h, out_w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] ov = out
    cdef Py_ssize_t r, c
    cdef int x0, y0, x1, y1
    cdef double sx, sy, fx, fy, top, bot, val
    cdef double xmax = w - 1, ymax = h - 1
    for r in range(out_h):
        for c in range(out_w):
            sx = inv[0, 0] * c + inv[0, 1] * r + inv[0, 2]
            sy = inv[1, 0] * c + inv[1, 1] * r + inv[1, 2]
            if sx < 0.0:
                sx = 0.0
            elif sx > xmax:
                sx = xmax
            if sy < 0.0:
                sy = 0.0
            elif sy > ymax:
                sy = ymax
            x0 = <int>floor(sx)
            y0 = <int>floor(sy)
            fx = sx - x0
            fy = sy - y0
            x1 = x0 + 1 if x0 + 1 < w else x0
            y1 = y0 + 1 if y0 + 1 < h else y0
            top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
            val = floor(top * (1.0 - fy) + bot * fy + 0.5)
            if val < 0.0:
                val = 0.0
            elif val > 255.0:
                val = 255.0
            ov[r, c] = <cnp.uint8_t>val
    return out


def geodesic_angles(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double ax, ay, az, aw, bx, by, bz, bw, rx, ry, rz, rw
    for i in range(n):
        ax = -a[i, 0]
        ay = -a[i, 1]
        az = -a[i, 2]
        aw = a[i, 3]
        bx = b[i, 0]
        by = b[i, 1]
        bz = b[i, 2]
        bw = b[i, 3]
        rx = aw * bx + bw * ax + ay * bz - az * by
        ry = aw * by + bw * ay + az * bx - ax * bz
        rz = aw * bz + bw * az + ax * by - ay * bx
        rw = aw * bw - ax * bx - ay * by - az * bz
        ov[i] = 2.0 * atan2(sqrt(rx * rx + ry * ry + rz * rz), fabs(rw))
    return out
