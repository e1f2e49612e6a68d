"""Pure-numpy implementations of the hot per-pixel kernels.

Selected at import by :mod:`warpcost.kernels` when the compiled extension
is unavailable (or forced via ``WARPCOST_KERNELS=numpy``). Must stay
bit-for-bit equivalent to the compiled backend; the parity tests compare
the two directly.
"""

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view


def bilinear_warp(img, u, v):
    """Sample `img` at (x + u, y + v) with bilinear interpolation.

    Out-of-domain sample points are clamped to the image edge; the returned
    validity mask is False exactly where the (pre-clamp) sample point fell
    outside [0, W-1] x [0, H-1].

    Returns (warped, valid) with warped float64 and valid bool, both (H, W).
    """
    h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = xs + u
    sy = ys + v
    valid = (sx >= 0.0) & (sx <= w - 1.0) & (sy >= 0.0) & (sy <= h - 1.0)

    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    # keep the +1 neighbour in range for samples exactly on the far edge
    x0 = np.minimum(x0, w - 2.0) if w > 1 else x0
    y0 = np.minimum(y0, h - 2.0) if h > 1 else y0
    fx = sx - x0
    fy = sy - y0
    ix = x0.astype(np.intp)
    iy = y0.astype(np.intp)
    ix1 = np.minimum(ix + 1, w - 1)
    iy1 = np.minimum(iy + 1, h - 1)

    top = img[iy, ix] * (1.0 - fx) + img[iy, ix1] * fx
    bot = img[iy1, ix] * (1.0 - fx) + img[iy1, ix1] * fx
    warped = top * (1.0 - fy) + bot * fy
    return warped, valid


def extract_patches(img, patch_size, stride, valid=None):
    """Extract flattened row-major patches at stride-spaced top-left corners.

    With `valid` given, only patches whose every pixel is valid are kept.
    Returns (patches (N, p*p) float64, ys (N,), xs (N,)) with positions in
    row-major scan order (y outer, x inner).
    """
    h, w = img.shape
    p = patch_size
    if h < p or w < p:
        return (np.empty((0, p * p), dtype=np.float64),
                np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp))
    windows = sliding_window_view(img, (p, p))[::stride, ::stride]
    ny, nx = windows.shape[:2]
    patches = windows.reshape(ny * nx, p * p).astype(np.float64, copy=True)
    ys, xs = np.meshgrid(np.arange(0, h - p + 1, stride, dtype=np.intp),
                         np.arange(0, w - p + 1, stride, dtype=np.intp),
                         indexing="ij")
    ys = ys.ravel()
    xs = xs.ravel()
    if valid is not None:
        ok = sliding_window_view(valid, (p, p))[::stride, ::stride]
        keep = ok.reshape(ny * nx, p * p).all(axis=1)
        patches = patches[keep]
        ys = ys[keep]
        xs = xs[keep]
    return patches, ys, xs


def accumulate_patches(values, ys, xs, height, width, patch_size):
    """Scatter-add flattened patches back onto an image grid.

    Returns (acc, counts): the per-pixel sum of patch values covering that
    pixel and the number of covering patches. Inverse-adjoint of
    extract_patches: top-left corners must be distinct.
    """
    p = patch_size
    acc = np.zeros((height, width), dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.float64)
    if len(ys) == 0:
        return acc, counts
    # corners are distinct, so for a fixed in-patch offset the targets are
    # distinct and a plain fancy-indexed add is safe
    for dy in range(p):
        ty = ys + dy
        for dx in range(p):
            acc[ty, xs + dx] += values[:, dy * p + dx]
            counts[ty, xs + dx] += 1.0
    return acc, counts
