"""Labeled image datasets: IDX files and a seeded synthetic generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FrameError

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W), float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigurationError(
                f"label count {len(self.labels)} != image count {len(self.images)}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, *sizes: int) -> list["ImageDataset"]:
        """Consecutive, non-overlapping slices of the given sizes."""
        if sum(sizes) > len(self):
            raise ConfigurationError(f"requested {sum(sizes)} samples from a dataset of {len(self)}")
        out, start = [], 0
        for n in sizes:
            out.append(self.subset(slice(start, start + n)))
            start += n
        return out


def _open(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"dataset file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a numpy array of its native dtype."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise FrameError(f"{path}: bad IDX magic {data[:4]!r}")
    type_code, ndim = data[2], data[3]
    if type_code not in IDX_DTYPES:
        raise FrameError(f"{path}: unknown IDX type code 0x{type_code:02x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FrameError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = IDX_DTYPES[type_code]
    count = int(np.prod(dims)) if ndim else 1
    if len(data) - header != count * dtype.itemsize:
        raise FrameError(
            f"{path}: payload has {len(data) - header} bytes, header declares {count * dtype.itemsize}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    codes = {v.newbyteorder("=").kind + str(v.itemsize): k for k, v in IDX_DTYPES.items()}
    key = arr.dtype.kind + str(arr.dtype.itemsize)
    if key not in codes:
        raise ConfigurationError(f"dtype {arr.dtype} not representable in IDX")
    code = codes[key]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(IDX_DTYPES[code]).tobytes())


def _to_unit(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float64)
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        return x / 255.0
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def load_idx_images(path) -> np.ndarray:
    """Images only, as ``(N, C, H, W)`` floats in [0, 1]; 3-dim files get C = 1."""
    raw = read_idx(path)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise FrameError(f"{path}: image IDX must have 3 or 4 dimensions, got {raw.ndim}")
    return _to_unit(raw)


def load_idx(images_path, labels_path) -> ImageDataset:
    images = load_idx_images(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise FrameError(f"{labels_path}: label IDX must be 1-dimensional")
    if len(labels) != len(images):
        raise ConfigurationError(f"label count {len(labels)} != image count {len(images)}")
    labels = labels.astype(np.int64)
    return ImageDataset(images, labels, int(labels.max()) + 1)


def gen_synthetic(classes: int = 10, n: int = 1000, seed: int = 0,
                  size: int = 32, channels: int = 3) -> ImageDataset:
    """Class-conditional stripe-and-blob images.

    Class ``c`` fixes a stripe orientation, a stripe frequency, a colour mix and
    a blob quadrant; each sample jitters phase, blob position and contrast and
    adds pixel noise. Labels are balanced and shuffled.
    """
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if n <= 0:
        raise ConfigurationError(f"need a positive sample count, got {n}")
    rng = np.random.default_rng(seed)
    # per-class templates drawn from a fixed stream so they do not depend on n
    trng = np.random.default_rng(10_007)
    angles = np.pi * np.arange(classes) / classes
    freqs = 2.0 + (np.arange(classes) % 3)
    colours = trng.uniform(0.2, 1.0, size=(classes, channels))
    quad = trng.uniform(0.25, 0.75, size=(classes, 2)) * size

    labels = rng.permutation(np.arange(n) % classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, n)
    contrast = rng.uniform(0.7, 1.3, n)
    jitter = rng.normal(0, 2.5, size=(n, 2))
    noise = rng.normal(0, 0.08, size=(n, channels, size, size))

    images = np.empty((n, channels, size, size))
    for i in range(n):
        c = labels[i]
        u = xx * np.cos(angles[c]) + yy * np.sin(angles[c])
        stripes = np.sin(2 * np.pi * freqs[c] * u / size + phase[i])
        by, bx = quad[c] + jitter[i]
        blob = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * 4.0 ** 2))
        pattern = 0.22 * contrast[i] * stripes + 0.35 * blob
        images[i] = 0.45 + colours[c][:, None, None] * pattern
    images = np.clip(images + noise, 0.0, 1.0)
    return ImageDataset(images, labels.astype(np.int64), classes)
