# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot per-pixel kernels.

Semantics must match warpcost.kernels._numpy exactly; the parity tests
compare the two backends on random inputs.
"""

import numpy as np

cimport numpy as cnp

from libc.math cimport floor

cnp.import_array()


def bilinear_warp(double[:, ::1] img, double[:, ::1] u, double[:, ::1] v):
    """Sample `img` at (x + u, y + v) with bilinear interpolation.

    Out-of-domain sample points are clamped to the image edge; the returned
    validity mask is False exactly where the (pre-clamp) sample point fell
    outside [0, W-1] x [0, H-1].

    Returns (warped, valid) with warped float64 and valid bool, both (H, W).
    """
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    warped_arr = np.empty((h, w), dtype=np.float64)
    valid_arr = np.empty((h, w), dtype=np.uint8)
    cdef double[:, ::1] warped = warped_arr
    cdef unsigned char[:, ::1] valid = valid_arr
    cdef Py_ssize_t y, x, ix, iy, ix1, iy1
    cdef double sx, sy, x0, y0, fx, fy, top, bot
    cdef double xmax = w - 1.0
    cdef double ymax = h - 1.0

    for y in range(h):
        for x in range(w):
            sx = x + u[y, x]
            sy = y + v[y, x]
            valid[y, x] = (sx >= 0.0) and (sx <= xmax) and \
                          (sy >= 0.0) and (sy <= ymax)
            if sx < 0.0:
                sx = 0.0
            elif sx > xmax:
                sx = xmax
            if sy < 0.0:
                sy = 0.0
            elif sy > ymax:
                sy = ymax
            x0 = floor(sx)
            y0 = floor(sy)
            if w > 1 and x0 > w - 2.0:
                x0 = w - 2.0
            if h > 1 and y0 > h - 2.0:
                y0 = h - 2.0
            fx = sx - x0
            fy = sy - y0
            ix = <Py_ssize_t>x0
            iy = <Py_ssize_t>y0
            ix1 = ix + 1 if ix + 1 < w else w - 1
            iy1 = iy + 1 if iy + 1 < h else h - 1
            top = img[iy, ix] * (1.0 - fx) + img[iy, ix1] * fx
            bot = img[iy1, ix] * (1.0 - fx) + img[iy1, ix1] * fx
            warped[y, x] = top * (1.0 - fy) + bot * fy
    return warped_arr, valid_arr.view(np.bool_)


def extract_patches(double[:, ::1] img, Py_ssize_t patch_size,
                    Py_ssize_t stride, valid=None):
    """Extract flattened row-major patches at stride-spaced corners.

    With `valid` given, only patches whose every pixel is valid are kept.
    Returns (patches (N, p*p) float64, ys (N,), xs (N,)).
    """
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    cdef Py_ssize_t p = patch_size
    if h < p or w < p:
        return (np.empty((0, p * p), dtype=np.float64),
                np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp))
    cdef Py_ssize_t ny = (h - p) // stride + 1
    cdef Py_ssize_t nx = (w - p) // stride + 1
    cdef unsigned char[:, ::1] vmask
    cdef bint have_mask = valid is not None
    if have_mask:
        vmask = np.ascontiguousarray(valid, dtype=np.uint8)

    patches_arr = np.empty((ny * nx, p * p), dtype=np.float64)
    ys_arr = np.empty(ny * nx, dtype=np.intp)
    xs_arr = np.empty(ny * nx, dtype=np.intp)
    cdef double[:, ::1] patches = patches_arr
    cdef Py_ssize_t[::1] ys = ys_arr
    cdef Py_ssize_t[::1] xs = xs_arr
    cdef Py_ssize_t iy, ix, y0, x0, dy, dx, n
    cdef bint ok

    n = 0
    for iy in range(ny):
        y0 = iy * stride
        for ix in range(nx):
            x0 = ix * stride
            if have_mask:
                ok = True
                for dy in range(p):
                    for dx in range(p):
                        if not vmask[y0 + dy, x0 + dx]:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    continue
            for dy in range(p):
                for dx in range(p):
                    patches[n, dy * p + dx] = img[y0 + dy, x0 + dx]
            ys[n] = y0
            xs[n] = x0
            n += 1
    return patches_arr[:n], ys_arr[:n], xs_arr[:n]


def accumulate_patches(double[:, ::1] values, Py_ssize_t[::1] ys,
                       Py_ssize_t[::1] xs, Py_ssize_t height,
                       Py_ssize_t width, Py_ssize_t patch_size):
    """Scatter-add flattened patches back onto an image grid.

    Returns (acc, counts): per-pixel sum of covering patch values and the
    number of covering patches.
    """
    cdef Py_ssize_t p = patch_size
    acc_arr = np.zeros((height, width), dtype=np.float64)
    counts_arr = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] acc = acc_arr
    cdef double[:, ::1] counts = counts_arr
    cdef Py_ssize_t i, dy, dx, y0, x0
    cdef Py_ssize_t n = ys.shape[0]

    for i in range(n):
        y0 = ys[i]
        x0 = xs[i]
        for dy in range(p):
            for dx in range(p):
                acc[y0 + dy, x0 + dx] += values[i, dy * p + dx]
                counts[y0 + dy, x0 + dx] += 1.0
    return acc_arr, counts_arr
