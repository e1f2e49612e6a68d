"""Backend dispatch for the per-pixel hot kernels.

Prefers the compiled extension and falls back to the pure-numpy
implementation. ``WARPCOST_KERNELS=numpy`` or ``=native`` forces a
backend; forcing ``native`` when the extension failed to build raises
at import time rather than silently degrading.
"""

import os

import numpy as np

from . import _numpy

_forced = os.environ.get("WARPCOST_KERNELS", "").strip().lower()
if _forced == "numpy":
    _impl = _numpy
elif _forced == "native":
    from . import _native as _impl
elif _forced == "":
    try:
        from . import _native as _impl
    except ImportError:
        _impl = _numpy
else:
    raise ImportError(
        f"WARPCOST_KERNELS must be 'native' or 'numpy', got {_forced!r}")

BACKEND = "native" if _impl.__name__.endswith("_native") else "numpy"


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear_warp(img, u, v):
    """Sample `img` at (x + u, y + v), bilinear, clamp-to-edge.

    Returns (warped, valid); valid is False where the sample point fell
    outside the image domain before clamping.
    """
    img = _as_f64(img)
    u = _as_f64(u)
    v = _as_f64(v)
    if u.shape != img.shape or v.shape != img.shape:
        raise ValueError("flow components must match the image shape")
    return _impl.bilinear_warp(img, u, v)


def extract_patches(img, patch_size, stride=1, valid=None):
    """Flattened row-major patches at stride-spaced top-left corners.

    With `valid` given, patches containing any invalid pixel are dropped.
    Returns (patches (N, p*p), ys (N,), xs (N,)) in scan order.
    """
    img = _as_f64(img)
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    if valid is not None:
        valid = np.ascontiguousarray(valid, dtype=np.uint8)
        if valid.shape != img.shape:
            raise ValueError("valid mask must match the image shape")
    return _impl.extract_patches(img, patch_size, stride, valid)


def accumulate_patches(values, ys, xs, height, width):
    """Scatter-add flattened p*p patches back onto a (height, width) grid.

    Returns (acc, counts): per-pixel sums and cover counts.
    """
    values = _as_f64(np.atleast_2d(values))
    p = int(round(np.sqrt(values.shape[1])))
    if p * p != values.shape[1]:
        raise ValueError("patch values must flatten square patches")
    ys = np.ascontiguousarray(ys, dtype=np.intp)
    xs = np.ascontiguousarray(xs, dtype=np.intp)
    if ys.shape != xs.shape or ys.ndim != 1 or len(ys) != values.shape[0]:
        raise ValueError("ys/xs must be 1-d and match the patch count")
    if len(ys) and (ys.min() < 0 or xs.min() < 0
                    or ys.max() + p > height or xs.max() + p > width):
        raise ValueError("patch placement exceeds the target grid")
    return _impl.accumulate_patches(values, ys, xs, height, width, p)
