"""Kernel backend contracts: warp, patch extraction, accumulation.

The native (compiled) and NumPy implementations must agree bit-for-bit;
both are checked against brute-force loop oracles here.
"""

import importlib
import subprocess
import sys

import numpy as np
import pytest

from warpcost import kernels

_numpy = importlib.import_module("warpcost.kernels._numpy")
_backends = [("numpy", _numpy)]
try:
    _native = importlib.import_module("warpcost.kernels._native")
    _backends.append(("native", _native))
except ImportError:  # pure-python install
    _native = None


def _warp_oracle(img, u, v):
    """Scalar-loop bilinear warp with border clamping."""
    h, w = img.shape
    out = np.zeros_like(img)
    valid = np.zeros(img.shape, dtype=bool)
    for y in range(h):
        for x in range(w):
            sx, sy = x + u[y, x], y + v[y, x]
            valid[y, x] = 0.0 <= sx <= w - 1 and 0.0 <= sy <= h - 1
            sx, sy = min(max(sx, 0.0), w - 1), min(max(sy, 0.0), h - 1)
            x0, y0 = min(int(sx), w - 2), min(int(sy), h - 2)
            fx, fy = sx - x0, sy - y0
            out[y, x] = (img[y0, x0] * (1 - fx) * (1 - fy)
                         + img[y0, x0 + 1] * fx * (1 - fy)
                         + img[y0 + 1, x0] * (1 - fx) * fy
                         + img[y0 + 1, x0 + 1] * fx * fy)
    return out, valid


@pytest.mark.parametrize("name,mod", _backends)
class TestBilinearWarp:
    def test_matches_loop_oracle(self, name, mod):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            img = rng.random((11, 14))
            u = rng.uniform(-4, 4, img.shape)
            v = rng.uniform(-4, 4, img.shape)
            got, gval = mod.bilinear_warp(img, u, v)
            want, wval = _warp_oracle(img, u, v)
            np.testing.assert_allclose(got, want, atol=1e-13)
            np.testing.assert_array_equal(gval, wval)

    def test_zero_flow_is_identity(self, name, mod):
        rng = np.random.default_rng(2)
        img = rng.random((9, 9))
        z = np.zeros_like(img)
        got, valid = mod.bilinear_warp(img, z, z)
        np.testing.assert_array_equal(got, img)
        assert valid.all()

    def test_integer_shift_exact(self, name, mod):
        """Integer displacements sample grid points with no blending."""
        rng = np.random.default_rng(3)
        img = rng.random((10, 12))
        u = np.full(img.shape, 3.0)
        v = np.full(img.shape, -2.0)
        got, valid = mod.bilinear_warp(img, u, v)
        np.testing.assert_array_equal(got[2:, :-3], img[:-2, 3:])
        assert valid[2:, :-3].all()
        assert not valid[:2, :].any() and not valid[:, -3:].any()

    def test_far_edge_sample_exact(self, name, mod):
        """Sampling exactly at (h-1, w-1) hits the corner pixel."""
        img = np.arange(12.0).reshape(3, 4)
        u = np.full(img.shape, 0.0)
        v = np.full(img.shape, 0.0)
        u[0, 0], v[0, 0] = 3.0, 2.0
        got, valid = mod.bilinear_warp(img, u, v)
        assert got[0, 0] == img[2, 3]
        assert valid[0, 0]


@pytest.mark.parametrize("name,mod", _backends)
class TestExtractPatches:
    def test_scan_order_and_values(self, name, mod):
        """Row-major scan; each patch is the contiguous window copy."""
        rng = np.random.default_rng(0)
        img = rng.random((9, 7))
        pats, ys, xs = mod.extract_patches(img, 3, 2, None)
        assert len(pats) == 4 * 3
        k = 0
        for y in range(0, 7, 2):
            for x in range(0, 5, 2):
                assert (ys[k], xs[k]) == (y, x)
                np.testing.assert_array_equal(
                    pats[k], img[y:y + 3, x:x + 3].ravel())
                k += 1

    def test_validity_filter_drops_touched_patches(self, name, mod):
        rng = np.random.default_rng(1)
        img = rng.random((8, 8))
        valid = np.ones(img.shape, dtype=bool)
        valid[4, 4] = False
        pats, ys, xs = mod.extract_patches(img, 3, 1, valid)
        for y, x in zip(ys, xs):
            assert not (y <= 4 < y + 3 and x <= 4 < x + 3)
        full, _, _ = mod.extract_patches(img, 3, 1, None)
        assert len(pats) == len(full) - 9

    def test_too_small_image_yields_empty(self, name, mod):
        img = np.zeros((2, 5))
        pats, ys, xs = mod.extract_patches(img, 3, 1, None)
        assert len(pats) == 0 and len(ys) == 0 and len(xs) == 0


@pytest.mark.parametrize("name,mod", _backends)
class TestAccumulatePatches:
    def test_matches_loop_oracle(self, name, mod):
        for seed in range(4):
            rng = np.random.default_rng(seed)
            img = rng.random((10, 9))
            pats, ys, xs = mod.extract_patches(img, 4, 2, None)
            vals = rng.random(pats.shape)
            acc, cnt = mod.accumulate_patches(vals, ys, xs, 10, 9, 4)
            acc2 = np.zeros(img.shape)
            cnt2 = np.zeros(img.shape)
            for val, y, x in zip(vals, ys, xs):
                acc2[y:y + 4, x:x + 4] += val.reshape(4, 4)
                cnt2[y:y + 4, x:x + 4] += 1
            np.testing.assert_allclose(acc, acc2, atol=1e-12)
            np.testing.assert_array_equal(cnt, cnt2)

    def test_extract_then_accumulate_averages_to_image(self, name, mod):
        """acc/cnt is the identity when values are the patches themselves."""
        rng = np.random.default_rng(7)
        img = rng.random((12, 12))
        pats, ys, xs = mod.extract_patches(img, 5, 1, None)
        acc, cnt = mod.accumulate_patches(pats, ys, xs, 12, 12, 5)
        assert cnt.min() >= 1
        np.testing.assert_allclose(acc / cnt, img, atol=1e-12)


@pytest.mark.skipif(_native is None, reason="native backend not built")
class TestBackendParity:
    def test_bitwise_identical_results(self):
        for seed in range(8):
            rng = np.random.default_rng(seed)
            h, w = rng.integers(6, 30, size=2)
            img = rng.random((h, w))
            u = rng.uniform(-5, 5, img.shape)
            v = rng.uniform(-5, 5, img.shape)
            w1, v1 = _numpy.bilinear_warp(img, u, v)
            w2, v2 = _native.bilinear_warp(img, u, v)
            np.testing.assert_array_equal(w1, w2)
            np.testing.assert_array_equal(v1, v2)
            p = int(rng.integers(2, 5))
            s = int(rng.integers(1, 4))
            p1, y1, x1 = _numpy.extract_patches(img, p, s, None)
            p2, y2, x2 = _native.extract_patches(img, p, s, None)
            np.testing.assert_array_equal(p1, p2)
            np.testing.assert_array_equal(y1, y2)
            np.testing.assert_array_equal(x1, x2)
            a1, c1 = _numpy.accumulate_patches(p1, y1, x1, h, w, p)
            a2, c2 = _native.accumulate_patches(p2, y2, x2, h, w, p)
            np.testing.assert_array_equal(a1, a2)
            np.testing.assert_array_equal(c1, c2)


class TestBackendSelection:
    def test_reports_a_known_backend(self):
        assert kernels.BACKEND in ("native", "numpy")

    def test_env_override_numpy(self):
        out = subprocess.run(
            [sys.executable, "-c",
             "from warpcost import kernels; print(kernels.BACKEND)"],
            env={"WARPCOST_KERNELS": "numpy", "PATH": "/usr/bin:/bin"},
            capture_output=True, text=True)
        assert out.stdout.strip() == "numpy"

    def test_env_override_invalid_fails(self):
        out = subprocess.run(
            [sys.executable, "-c", "import warpcost.kernels"],
            env={"WARPCOST_KERNELS": "fortran", "PATH": "/usr/bin:/bin"},
            capture_output=True, text=True)
        assert out.returncode != 0
        assert "WARPCOST_KERNELS" in out.stderr

    def test_wrapper_validates_shapes(self):
        img = np.zeros((4, 4))
        with pytest.raises(Exception):
            kernels.bilinear_warp(img, np.zeros((3, 4)), np.zeros((4, 4)))
