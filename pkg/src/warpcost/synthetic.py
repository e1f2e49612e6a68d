"""Synthetic layered scenes with exact ground-truth flow.

Textures are analytic sums of sinusoids, so both frames can be sampled
at arbitrary real coordinates and the ground-truth correspondence is
exact rather than resampled. Scenes compose a smoothly deforming
background with a translating occluder band; the resulting warp errors
are near-zero over tracked regions and show flat offsets and oriented
step edges inside occlusion strips, plus sensor noise and a smooth
brightness drift in the second frame.
"""

import math

from dataclasses import dataclass

import numpy as np

from .imaging import FlowField, Image

# soft edge width (px) for occluder boundaries; keeps gradients bounded
EDGE_SOFTNESS = 1.2


@dataclass
class ScenePair:
    """Image pair with exact flow and validity/occlusion annotations."""

    i1: Image
    i2: Image
    flow: FlowField
    occluded: np.ndarray  # bool, True where the target pixel is covered
    valid: np.ndarray     # bool, in-bounds and not occluded

    @property
    def pair(self):
        return self.i1, self.i2, self.flow


class SinusoidTexture:
    """Band-limited random texture evaluable at real coordinates."""

    def __init__(self, rng, n_waves=8, freq_range=(0.01, 0.1),
                 contrast=0.18, offset=0.5):
        lo, hi = freq_range
        # log-uniform radial frequency, uniform orientation
        freq = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n_waves))
        theta = rng.uniform(0.0, math.pi, size=n_waves)
        self.fx = freq * np.cos(theta)
        self.fy = freq * np.sin(theta)
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
        amp = 1.0 / np.sqrt(freq / lo)  # mild red spectrum
        # unit the RMS so `contrast` is the output standard deviation
        self.amp = amp / math.sqrt(float(np.sum(amp ** 2)) / 2.0) * contrast
        self.offset = offset

    def __call__(self, xs, ys):
        val = np.full(np.broadcast(xs, ys).shape, self.offset)
        for a, fx, fy, ph in zip(self.amp, self.fx, self.fy, self.phase):
            val += a * np.sin(2.0 * math.pi * (fx * xs + fy * ys) + ph)
        return val


class SinusoidField:
    """Smooth low-frequency scalar field, used for flow components."""

    def __init__(self, rng, amplitude, n_waves=3, max_freq=0.02):
        freq = rng.uniform(0.25 * max_freq, max_freq, size=n_waves)
        theta = rng.uniform(0.0, math.pi, size=n_waves)
        self.fx = freq * np.cos(theta)
        self.fy = freq * np.sin(theta)
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
        self.amp = np.full(n_waves, amplitude / n_waves)

    def __call__(self, xs, ys):
        val = np.zeros(np.broadcast(xs, ys).shape)
        for a, fx, fy, ph in zip(self.amp, self.fx, self.fy, self.phase):
            val += a * np.sin(2.0 * math.pi * (fx * xs + fy * ys) + ph)
        return val


def _grid(height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _invert_flow(u_fn, v_fn, xs, ys, iters=12):
    """Solve x + v(x) = y by fixed point; valid for small smooth flows."""
    gx, gy = xs.copy(), ys.copy()
    for _ in range(iters):
        gx = xs - u_fn(gx, gy)
        gy = ys - v_fn(gx, gy)
    return gx, gy


def _clip_image(data, rng, noise_sigma):
    if noise_sigma > 0.0:
        data = data + rng.normal(0.0, noise_sigma, size=data.shape)
    return Image(np.clip(data, 0.0, 1.0))


def translated_pair(height, width, dx, dy, seed=0, noise_sigma=0.0):
    """Globally translated texture; ground-truth flow is constant (dx, dy)."""
    rng = np.random.default_rng(seed)
    tex = SinusoidTexture(rng)
    xs, ys = _grid(height, width)
    i1 = _clip_image(tex(xs, ys), rng, noise_sigma)
    i2 = _clip_image(tex(xs - dx, ys - dy), rng, noise_sigma)
    flow = FlowField(np.full((height, width), float(dx)),
                     np.full((height, width), float(dy)))
    return i1, i2, flow


def rotated_pair(height, width, degrees, seed=0, noise_sigma=0.0):
    """Rotation about the image center; flow is the exact displacement."""
    rng = np.random.default_rng(seed)
    tex = SinusoidTexture(rng)
    xs, ys = _grid(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    ang = math.radians(degrees)
    c, s = math.cos(ang), math.sin(ang)
    # forward map y = R(x - c) + c, so frame two samples the inverse
    rx, ry = xs - cx, ys - cy
    u = (c * rx - s * ry + cx) - xs
    v = (s * rx + c * ry + cy) - ys
    bx = c * rx + s * ry + cx   # R^{-1} applied to the grid
    by = -s * rx + c * ry + cy
    i1 = _clip_image(tex(xs, ys), rng, noise_sigma)
    i2 = _clip_image(tex(bx, by), rng, noise_sigma)
    return i1, i2, FlowField(u, v)


def layered_pair(height, width, seed=0, bg_shift=2.0, warp_amp=1.0,
                 occluder_shift=3.0, band_width=None, noise_range=(0.001, 0.003),
                 dc_sigma=0.05, occluder_contrast=0.10, occluder_offset=0.2):
    """Textured background plus a translating occluder band.

    The background deforms by a small smooth flow (constant shift plus
    low-frequency sinusoids); a soft-edged band with its own smoother,
    offset texture translates over it. Ground truth assigns each pixel
    the motion of the surface visible in frame one, so pixels whose
    correspondence gets covered produce structured warp errors.
    """
    rng = np.random.default_rng(seed)
    xs, ys = _grid(height, width)
    t_bg = SinusoidTexture(rng)
    t_oc = SinusoidTexture(rng, freq_range=(0.01, 0.06),
                           contrast=occluder_contrast,
                           offset=0.5 + rng.choice([-1.0, 1.0]) * occluder_offset)

    ang = rng.uniform(0.0, 2.0 * math.pi)
    mag = rng.uniform(0.4, 1.0) * bg_shift
    base_u, base_v = mag * math.cos(ang), mag * math.sin(ang)
    fu = SinusoidField(rng, warp_amp)
    fv = SinusoidField(rng, warp_amp)
    u_fn = lambda x, y: base_u + fu(x, y)
    v_fn = lambda x, y: base_v + fv(x, y)

    # occluder band: soft indicator of n.x in [c - w/2, c + w/2]
    if band_width is None:
        band_width = rng.uniform(0.2, 0.35) * min(height, width)
    bang = rng.uniform(0.0, math.pi)
    nx, ny = math.cos(bang), math.sin(bang)
    center = nx * (width - 1) / 2.0 + ny * (height - 1) / 2.0 \
        + rng.uniform(-0.15, 0.15) * min(height, width)
    oang = rng.uniform(0.0, 2.0 * math.pi)
    omag = rng.uniform(0.6, 1.0) * occluder_shift
    ou, ov = omag * math.cos(oang), omag * math.sin(oang)

    def band(x, y):
        d = nx * x + ny * y - center
        lo = _smoothstep((d + band_width / 2.0) / EDGE_SOFTNESS + 0.5)
        hi = _smoothstep((band_width / 2.0 - d) / EDGE_SOFTNESS + 0.5)
        return lo * hi

    m1 = band(xs, ys)
    i1_data = m1 * t_oc(xs, ys) + (1.0 - m1) * t_bg(xs, ys)

    gx, gy = _invert_flow(u_fn, v_fn, xs, ys)
    bg2 = t_bg(gx, gy)
    m2 = band(xs - ou, ys - ov)
    i2_data = m2 * t_oc(xs - ou, ys - ov) + (1.0 - m2) * bg2
    if dc_sigma > 0.0:
        i2_data = i2_data + SinusoidField(rng, dc_sigma, max_freq=0.01)(xs, ys)

    occ_mask = m1 >= 0.5
    u = np.where(occ_mask, ou, u_fn(xs, ys))
    v = np.where(occ_mask, ov, v_fn(xs, ys))
    flow = FlowField(u, v)

    tx, ty = xs + u, ys + v
    in_bounds = (tx >= 0) & (tx <= width - 1) & (ty >= 0) & (ty <= height - 1)
    # covered where the target lands inside the band at its frame-two position
    occluded = ~occ_mask & (band(tx - ou, ty - ov) >= 0.5)

    sigma = rng.uniform(*noise_range)
    i1 = _clip_image(i1_data, rng, sigma)
    i2 = _clip_image(i2_data, rng, sigma)
    return ScenePair(i1, i2, flow, occluded, in_bounds & ~occluded)


def training_pairs(count, height=128, width=128, seed=0):
    """Scene pairs for building warp-error patch corpora."""
    return [layered_pair(height, width, seed=seed + i).pair
            for i in range(count)]


def benchmark_pairs(count, height=96, width=96, seed=0):
    """Gentler occlusion pairs for flow estimation benchmarks."""
    return [layered_pair(height, width, seed=seed + 10_000 + i,
                         bg_shift=1.5, warp_amp=0.6, occluder_shift=2.5)
            for i in range(count)]
