"""Images, flow fields, warping, pyramids, and bit-exact file I/O.

Intensities are float64 in [0,1]; warp-error images live in [-1,1].
Backward warping samples with clamp-to-edge bilinear interpolation and
carries a validity mask marking pixels whose sample point left the
image domain, so downstream patch extraction can skip boundary
artifacts.
"""

import struct

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from scipy.ndimage import gaussian_filter

from . import kernels
from .errors import DimensionMismatchError, FormatError

FLO_MAGIC = 202021.25  # little-endian float32 spells "PIEH"

# comment line embedded in PGM files holding [-1,1] data mapped to [0,1]
PGM_SIGNED_COMMENT = "signed-range -1 1"


@dataclass
class Image:
    """Single-channel intensity grid with an optional validity mask."""

    data: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionMismatchError(
                f"image data must be 2-d and nonempty, got shape {self.data.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape:
                raise DimensionMismatchError(
                    "validity mask shape differs from image shape")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def full_valid(self):
        """Validity mask, defaulting to all-True when none is attached."""
        if self.valid is None:
            return np.ones(self.data.shape, dtype=bool)
        return self.valid


@dataclass
class FlowField:
    """Per-pixel displacement (u, v) in pixels; u horizontal, v vertical."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise DimensionMismatchError(
                f"flow components must be 2-d and equal-shaped, "
                f"got {self.u.shape} and {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise FormatError("flow field contains non-finite values")

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class PyramidLevel:
    image: Image
    flow: Optional[FlowField] = None


@dataclass
class Pyramid:
    """Coarse-to-fine image stack; levels[0] is the coarsest."""

    levels: list = field(default_factory=list)
    scale_factor: float = 0.5

    def __len__(self):
        return len(self.levels)


def as_image(x):
    return x if isinstance(x, Image) else Image(np.asarray(x, dtype=np.float64))


def _check_same_shape(a, b, what="inputs"):
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"{what} must agree in shape, got {a.shape} and {b.shape}")


def backward_warp(image, flow):
    """Warp `image` backward by `flow`: out(p) = image(p + (u(p), v(p))).

    Bilinear sampling with clamp-to-edge coordinates; the returned image
    carries a validity mask that is False where the sample point fell
    outside the domain.
    """
    image = as_image(image)
    _check_same_shape(image.data, flow.u, "image and flow")
    warped, valid = kernels.bilinear_warp(image.data, flow.u, flow.v)
    return Image(warped, valid)


def warp_error(i1, i2, flow):
    """Warp error i1 - backward_warp(i2, flow), mask attached."""
    i1 = as_image(i1)
    i2 = as_image(i2)
    _check_same_shape(i1.data, i2.data, "image pair")
    warped = backward_warp(i2, flow)
    return Image(i1.data - warped.data, warped.valid)


def gradient(image):
    """Horizontal and vertical derivatives (dx, dy).

    Central differences on the interior, one-sided at borders.
    """
    image = as_image(image)
    if image.height < 2 or image.width < 2:
        raise DimensionMismatchError(
            "gradient requires at least 2 pixels per dimension")
    dy, dx = np.gradient(image.data)
    return Image(dx), Image(dy)


def resize_bilinear(data, new_height, new_width):
    """Resample a 2-d array to a new size with bilinear interpolation.

    Pixel centers are aligned via src = (dst + 0.5)/s - 0.5 with the
    effective per-axis scale s = new/old, clamped to the source domain.
    """
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape
    if (new_height, new_width) == (h, w):
        return data.copy()
    sy = (np.arange(new_height) + 0.5) * (h / new_height) - 0.5
    sx = (np.arange(new_width) + 0.5) * (w / new_width) - 0.5
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(h - 2, 0))
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(w - 2, 0))
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = data[np.ix_(y0, x0)] * (1 - fx) + data[np.ix_(y0, x1)] * fx
    bot = data[np.ix_(y1, x0)] * (1 - fx) + data[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def build_pyramid(image, scale=0.5, min_dim=16):
    """Gaussian pyramid, coarsest level first.

    Each step blurs with sigma = 0.5/scale then resamples by `scale`;
    stops before a level would drop below `min_dim` on either axis.
    """
    image = as_image(image)
    if not 0.0 < scale < 1.0:
        raise ValueError("scale must be in (0, 1)")
    if min_dim < 8:
        raise ValueError("min_dim must be at least 8")
    sigma = 0.5 / scale
    levels = [image]
    cur = image.data
    while True:
        h, w = cur.shape
        nh = int(h * scale + 0.5)
        nw = int(w * scale + 0.5)
        if min(nh, nw) < min_dim:
            break
        blurred = gaussian_filter(cur, sigma=sigma, mode="nearest")
        cur = resize_bilinear(blurred, nh, nw)
        levels.append(Image(cur))
    levels.reverse()
    return Pyramid([PyramidLevel(im) for im in levels], scale_factor=scale)


def read_flo(path):
    """Read a Middlebury .flo flow file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset 0")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if not magic == FLO_MAGIC:
        raise FormatError(
            f"{path}: bad magic {magic!r} at byte offset 0 "
            f"(expected {FLO_MAGIC})")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at byte offset 4")
    width, height = struct.unpack_from("<ii", raw, 4)
    if width < 1 or height < 1:
        raise FormatError(
            f"{path}: invalid dimensions {width}x{height} at byte offset 4")
    need = 8 * width * height
    if len(raw) - 12 < need:
        raise FormatError(
            f"{path}: truncated payload at byte offset {len(raw)} "
            f"(expected {12 + need} bytes total)")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    bad = np.flatnonzero(~np.isfinite(uv))
    if bad.size:
        raise FormatError(
            f"{path}: non-finite value at byte offset {12 + 4 * int(bad[0])}")
    uv = uv.reshape(height, width, 2)
    return FlowField(uv[:, :, 0].astype(np.float64),
                     uv[:, :, 1].astype(np.float64))


def write_flo(flow, path):
    """Write a Middlebury .flo flow file (little-endian float32)."""
    h, w = flow.shape
    uv = np.empty((h, w, 2), dtype="<f4")
    uv[:, :, 0] = flow.u
    uv[:, :, 1] = flow.v
    if not np.isfinite(uv).all():
        raise FormatError("flow contains values not representable in float32")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(uv.tobytes())


def _pgm_tokens(raw, path):
    """Header tokenizer: whitespace-separated tokens, '#' comments.

    Yields (token, end_offset, comments_seen_so_far).
    """
    i = 0
    n = len(raw)
    comments = []
    while True:
        while i < n and raw[i:i + 1].isspace():
            i += 1
        if i < n and raw[i] == ord("#"):
            j = raw.find(b"\n", i)
            j = n if j < 0 else j
            comments.append(raw[i + 1:j].decode("latin-1").strip())
            i = j + 1
            continue
        if i >= n:
            raise FormatError(f"{path}: truncated header at byte offset {i}")
        j = i
        while j < n and not raw[j:j + 1].isspace():
            j += 1
        yield raw[i:j], j, comments
        i = j


def read_pgm(path):
    """Read a binary (P5) PGM file; intensities map to [0,1].

    Files written by write_pgm with signed=True carry a comment marking
    the affine [-1,1] -> [0,1] map and are mapped back on read.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    tok = _pgm_tokens(raw, path)
    magic, _, _ = next(tok)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    fields = []
    for _ in range(3):
        t, end, comments = next(tok)
        try:
            fields.append(int(t.decode("latin-1")))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header field {t!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    # exactly one whitespace byte separates maxval from the payload
    start = end + 1
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    if len(raw) - start != need:
        raise FormatError(
            f"{path}: payload size mismatch, expected {need} bytes, "
            f"got {len(raw) - start}")
    pix = np.frombuffer(raw, dtype=dtype, count=width * height, offset=start)
    data = pix.reshape(height, width).astype(np.float64) / maxval
    if any(c == PGM_SIGNED_COMMENT for c in comments):
        data = data * 2.0 - 1.0
    return Image(data)


def write_pgm(image, path, maxval=255, signed=False):
    """Write a binary (P5) PGM file, quantizing with round-half-up.

    With signed=True the data is mapped [-1,1] -> [0,1] first and a
    comment line records the mapping for the reader.
    """
    image = as_image(image)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    data = image.data
    if signed:
        data = (np.clip(data, -1.0, 1.0) + 1.0) / 2.0
    else:
        data = np.clip(data, 0.0, 1.0)
    q = np.floor(data * maxval + 0.5)
    header = b"P5\n"
    if signed:
        header += b"# " + PGM_SIGNED_COMMENT.encode() + b"\n"
    header += f"{image.width} {image.height}\n{maxval}\n".encode()
    payload = q.astype(np.uint8 if maxval == 255 else np.dtype(">u2")).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)
