"""Image datasets: the binary file format and the bundled synthetic digits.

File layout (little-endian)::

    b"ZODSDATA" | version u32 | n u32 | c u32 | h u32 | w u32 | has_labels u8
    | n*c*h*w float64 pixels, row-major | n u32 labels (if has_labels)
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from zoaeds.errors import ArgumentError, FormatError
from zoaeds.numerics.rng import RngStream

MAGIC = b"ZODSDATA"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIB")
HEADER_SIZE = _HEADER.size  # 29


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) in [0, 1]
    labels: np.ndarray | None = None
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ArgumentError(f"{len(self.labels)} labels for {len(self.images)} images")
            if len(self.labels) and self.labels.min() < 0:
                raise ArgumentError("labels must be non-negative")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None and len(self.labels) else 0

    def subset(self, idx, split=None) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split if split is None else split)

    def checksum(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def to_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, c, h, w, int(ds.labels is not None)),
        np.ascontiguousarray(ds.images, dtype="<f8").tobytes(),
    ]
    if ds.labels is not None:
        parts.append(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, split: str = "") -> Dataset:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", offset=len(buf))
    magic, version, n, c, h, w, has_labels = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels must be 0 or 1, got {has_labels}", offset=HEADER_SIZE - 1)
    per_image = c * h * w * 8
    avail = len(buf) - HEADER_SIZE
    if avail < n * per_image:
        complete = avail // per_image if per_image else 0
        raise FormatError(
            f"truncated pixel data: header says {n} images, only {complete} complete",
            offset=HEADER_SIZE + complete * per_image,
        )
    images = np.frombuffer(buf, dtype="<f8", count=n * c * h * w, offset=HEADER_SIZE)
    images = images.astype(np.float64).reshape(n, c, h, w)
    labels = None
    if has_labels:
        start = HEADER_SIZE + n * per_image
        if len(buf) < start + 4 * n:
            complete = (len(buf) - start) // 4
            raise FormatError(f"truncated labels: {complete} of {n}", offset=start + 4 * complete)
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=start).astype(np.int64)
    return Dataset(images, labels, split)


def save_dataset(ds: Dataset, path) -> str:
    data = to_bytes(ds)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path, split: str = "") -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), split)


# -- synthetic 8x8 digits ---------------------------------------------------

# seven-segment strokes on the unit square: (x0, y0, x1, y1)
_SEGMENTS = {
    "a": (0.3, 0.18, 0.7, 0.18),
    "b": (0.7, 0.18, 0.7, 0.5),
    "c": (0.7, 0.5, 0.7, 0.82),
    "d": (0.3, 0.82, 0.7, 0.82),
    "e": (0.3, 0.5, 0.3, 0.82),
    "f": (0.3, 0.18, 0.3, 0.5),
    "g": (0.3, 0.5, 0.7, 0.5),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]

TOY_SEED = 20220425


def _render(strokes, canvas, thickness):
    ys, xs = np.meshgrid((np.arange(canvas) + 0.5) / canvas, (np.arange(canvas) + 0.5) / canvas, indexing="ij")
    dist = np.full((canvas, canvas), np.inf)
    for x0, y0, x1, y1 in strokes:
        dx, dy = x1 - x0, y1 - y0
        t = ((xs - x0) * dx + (ys - y0) * dy) / max(dx * dx + dy * dy, 1e-12)
        t = np.clip(t, 0.0, 1.0)
        dist = np.minimum(dist, np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy)))
    return np.clip(1.0 - (dist - thickness) / (1.5 / canvas), 0.0, 1.0)


def make_toy_digits(n: int, seed: int = TOY_SEED, size: int = 8, num_classes: int = 10, split: str = "toy") -> Dataset:
    """Jittered seven-segment digits drawn at 2x resolution and average-pooled."""
    if not 1 <= num_classes <= 10:
        raise ArgumentError(f"num_classes must be in [1, 10], got {num_classes}")
    rng = RngStream(seed, ("toy-digits", split)).generator
    canvas = 2 * size
    images = np.empty((n, 1, size, size))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    for i, label in enumerate(labels):
        scale = rng.uniform(0.8, 1.1)
        shift = rng.uniform(-0.08, 0.08, size=2)
        slant = rng.uniform(-0.2, 0.2)
        strokes = []
        for seg in _DIGITS[label]:
            pts = np.array(_SEGMENTS[seg]).reshape(2, 2) + rng.normal(0, 0.025, size=(2, 2))
            pts = (pts - 0.5) * scale + 0.5
            pts[:, 0] += slant * (0.5 - pts[:, 1]) + shift[0]
            pts[:, 1] += shift[1]
            strokes.append(pts.ravel())
        hi = _render(strokes, canvas, rng.uniform(0.04, 0.07))
        images[i, 0] = hi.reshape(size, 2, size, 2).mean(axis=(1, 3))
    return Dataset(np.clip(images, 0.0, 1.0), labels, split)


def toy_splits(n_train: int = 150, n_test: int = 50, seed: int = TOY_SEED, num_classes: int = 10):
    """Disjoint train/test draws; 150 + 50 gives the bundled 200-example toy set."""
    return (
        make_toy_digits(n_train, seed, num_classes=num_classes, split="train"),
        make_toy_digits(n_test, seed, num_classes=num_classes, split="test"),
    )
