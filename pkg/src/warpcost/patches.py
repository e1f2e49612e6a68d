"""Datasets of flattened warp-error patches.

Patches are rows of an (N, patch_size**2) float64 array, extracted at
stride-spaced positions from warp-error images, skipping any patch that
touches a pixel invalidated by the warp. Serialized in a small binary
container ("WEPD") that round-trips at float32 precision.
"""

import struct

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, FormatError
from .imaging import FlowField, Image, as_image, read_flo, read_pgm, warp_error

WEPD_MAGIC = b"WEPD"
WEPD_VERSION = 1

# Sintel-style pair-level split ratio, 708 train : 333 test
DEFAULT_TRAIN_FRACTION = 708 / 1041


@dataclass
class PatchSet:
    """Fixed-size patch collection with its provenance tag."""

    patch_size: int
    patches: np.ndarray  # (N, patch_size**2) float64
    split_tag: str = "train"

    def __post_init__(self):
        self.patches = np.atleast_2d(np.asarray(self.patches, dtype=np.float64))
        dim = self.patch_size * self.patch_size
        if self.patches.size == 0:
            self.patches = self.patches.reshape(0, dim)
        if self.patches.shape[1] != dim:
            raise DimensionMismatchError(
                f"patch rows have dim {self.patches.shape[1]}, "
                f"expected {dim} for patch_size {self.patch_size}")

    @property
    def dim(self):
        return self.patch_size * self.patch_size

    def __len__(self):
        return self.patches.shape[0]


def extract_patches(error_image, patch_size, stride=1):
    """All fully valid patches of a warp-error image, flattened row-major.

    Patch corners lie at multiples of `stride`; patches overlapping any
    invalid pixel (per the image's warp mask) are dropped. Returns an
    (N, patch_size**2) array; empty when the image is too small.
    """
    error_image = as_image(error_image)
    patches, _, _ = kernels.extract_patches(
        error_image.data, patch_size, stride, error_image.valid)
    return patches


def pair_patches(i1, i2, flow, patch_size=8, stride=8):
    """Warp-error patches for one image pair with ground-truth flow."""
    err = warp_error(i1, i2, flow)
    return extract_patches(err, patch_size, stride)


def split_pairs(pairs, train_fraction=DEFAULT_TRAIN_FRACTION, seed=0):
    """Partition an image-pair list into disjoint train/test lists."""
    pairs = list(pairs)
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(train_fraction * len(pairs)))
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train:]]
    return train, test


def build_dataset(pairs, patch_size=8, stride=8, sample_count=None, seed=0,
                  split_tag="train"):
    """Build a PatchSet from (i1 path, i2 path, gt-flow path) triples.

    Computes the warp error per pair, extracts fully valid patches, and
    uniformly subsamples without replacement to `sample_count` (seeded,
    deterministic). Dimension mismatches and unreadable files raise with
    the offending pair named.
    """
    collected = []
    for triple in pairs:
        p1, p2, pf = triple
        try:
            i1 = p1 if isinstance(p1, Image) else read_pgm(p1)
            i2 = p2 if isinstance(p2, Image) else read_pgm(p2)
            flow = pf if isinstance(pf, FlowField) else read_flo(pf)
        except OSError as exc:
            raise FormatError(f"pair {triple}: unreadable input ({exc})") from exc
        if i1.shape != i2.shape or i1.shape != flow.shape:
            raise DimensionMismatchError(
                f"pair {triple}: shapes differ "
                f"(i1 {i1.shape}, i2 {i2.shape}, flow {flow.shape})")
        collected.append(pair_patches(i1, i2, flow, patch_size, stride))
    dim = patch_size * patch_size
    if collected:
        patches = np.concatenate(collected, axis=0)
    else:
        patches = np.empty((0, dim))
    patches = subsample(patches, sample_count, seed)
    return PatchSet(patch_size, patches, split_tag)


def subsample(patches, sample_count, seed):
    """Uniform seeded subsample without replacement (no-op when enough)."""
    if sample_count is None or len(patches) <= sample_count:
        return patches
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(patches), size=sample_count, replace=False))
    return patches[idx]


def save_dataset(dataset, path):
    """Write the WEPD binary container (float32 payload)."""
    payload = dataset.patches.astype("<f4")
    if not np.isfinite(payload).all():
        raise FormatError("dataset contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(WEPD_MAGIC)
        fh.write(struct.pack("<II", WEPD_VERSION, dataset.dim))
        fh.write(struct.pack("<Q", len(dataset)))
        fh.write(payload.tobytes())


def load_dataset(path, split_tag="train"):
    """Read a WEPD container back into a PatchSet."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != WEPD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, dim = struct.unpack_from("<II", raw, 4)
    if version != WEPD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count, = struct.unpack_from("<Q", raw, 12)
    need = count * dim * 4
    if len(raw) - 20 != need:
        raise FormatError(
            f"{path}: payload count mismatch, header says {count} patches "
            f"({need} bytes), file holds {len(raw) - 20}")
    patch_size = int(round(np.sqrt(dim)))
    if patch_size * patch_size != dim:
        raise FormatError(f"{path}: patch dim {dim} is not a square")
    data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=20)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite patch values")
    return PatchSet(patch_size, data.reshape(count, dim).astype(np.float64),
                    split_tag)
