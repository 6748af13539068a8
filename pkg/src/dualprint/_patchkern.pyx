# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled patch sampling kernel.

Must stay numerically in lockstep with ``_patch_numpy``: identical weight
expressions and accumulation order, all in float64.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, floor, sin

cnp.import_array()

BACKEND_NAME = "cython"


cdef inline double _tap(const double[:, ::1] image, Py_ssize_t h, Py_ssize_t w,
                        Py_ssize_t yy, Py_ssize_t xx) nogil:
    if yy < 0 or yy >= h or xx < 0 or xx >= w:
        return 0.0
    return image[yy, xx]


def sample_patches(image_in, centers_in, thetas_in, int patch_size, int out_size):
    """Rotated bilinear windows around each center, resized to out_size.

    Same contract as the NumPy backend: float64 image already scaled to
    [0, 1], centers (n, 2) as (x, y), thetas (n,) in radians.
    """
    cdef double[:, ::1] image = np.ascontiguousarray(image_in, dtype=np.float64)
    cdef double[:, ::1] centers = np.ascontiguousarray(
        np.asarray(centers_in, dtype=np.float64).reshape(-1, 2))
    cdef double[::1] thetas = np.ascontiguousarray(
        np.asarray(thetas_in, dtype=np.float64).reshape(-1))

    cdef Py_ssize_t n = centers.shape[0]
    cdef Py_ssize_t h = image.shape[0]
    cdef Py_ssize_t w = image.shape[1]
    cdef Py_ssize_t P = patch_size
    cdef Py_ssize_t S = out_size

    out_arr = np.empty((n, S, S), dtype=np.float64)
    win_arr = np.empty((P, P), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] win = win_arr

    # Resize grid: half-pixel centers clamped into the window.
    i0_arr = np.empty(S, dtype=np.intp)
    i1_arr = np.empty(S, dtype=np.intp)
    f_arr = np.empty(S, dtype=np.float64)
    cdef Py_ssize_t[::1] i0 = i0_arr
    cdef Py_ssize_t[::1] i1 = i1_arr
    cdef double[::1] f = f_arr
    cdef Py_ssize_t j
    cdef double u
    for j in range(S):
        u = (j + 0.5) * P / S - 0.5
        if u < 0.0:
            u = 0.0
        if u > P - 1.0:
            u = P - 1.0
        i0[j] = <Py_ssize_t>floor(u)
        f[j] = u - floor(u)
        i1[j] = i0[j] + 1
        if i1[j] > P - 1:
            i1[j] = P - 1

    cdef Py_ssize_t k, i, r, c, x0, y0
    cdef double ct, st, cx0, cy0, ox, oy, sx, sy, fx, fy
    cdef double wx0, wx1, wy0, wy1, half
    half = (P - 1) / 2.0

    with nogil:
        for k in range(n):
            ct = cos(thetas[k])
            st = sin(thetas[k])
            cx0 = centers[k, 0]
            cy0 = centers[k, 1]
            for i in range(P):
                oy = i - half
                for j in range(P):
                    ox = j - half
                    sx = cx0 + ct * ox - st * oy
                    sy = cy0 + st * ox + ct * oy
                    x0 = <Py_ssize_t>floor(sx)
                    y0 = <Py_ssize_t>floor(sy)
                    fx = sx - floor(sx)
                    fy = sy - floor(sy)
                    wx0 = 1.0 - fx
                    wx1 = fx
                    wy0 = 1.0 - fy
                    wy1 = fy
                    win[i, j] = ((wx0 * wy0) * _tap(image, h, w, y0, x0)
                                 + (wx1 * wy0) * _tap(image, h, w, y0, x0 + 1)
                                 + (wx0 * wy1) * _tap(image, h, w, y0 + 1, x0)
                                 + (wx1 * wy1) * _tap(image, h, w, y0 + 1, x0 + 1))
            for r in range(S):
                wy0 = 1.0 - f[r]
                wy1 = f[r]
                for c in range(S):
                    wx0 = 1.0 - f[c]
                    wx1 = f[c]
                    out[k, r, c] = ((wx0 * wy0) * win[i0[r], i0[c]]
                                    + (wx1 * wy0) * win[i0[r], i1[c]]
                                    + (wx0 * wy1) * win[i1[r], i0[c]]
                                    + (wx1 * wy1) * win[i1[r], i1[c]])
    return out_arr
