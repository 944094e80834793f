"""
MNIST / Fashion-MNIST ingestion.

Raw IDX files are parsed into uint8 arrays, scaled to [0, 1], resized from
28x28 to 32x32 with corner-aligned bilinear interpolation and wrapped in a
:class:`Dataset` with shape (N, 1, 32, 32).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    DimensionOverflowError,
    IdxFormatError,
    TruncatedPayloadError,
    WrongMagicError,
)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# IDX type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}

MAX_ELEMENTS = 2**31 - 1
NUM_CLASSES = 10
SOURCES = ("mnist", "fashion")


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: Optional[int] = None) -> np.ndarray:
    """Decode an IDX byte string into an array in native byte order."""
    if len(raw) < 4:
        raise TruncatedPayloadError(f"IDX header needs 4 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise WrongMagicError(f"magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    zero, code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise WrongMagicError(f"magic 0x{magic:08X} is not a valid IDX header")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedPayloadError(f"IDX header declares {ndim} dimensions but the file ends at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"dimensions {dims} describe {count} elements (limit {MAX_ELEMENTS})")
    dtype = IDX_TYPES[code]
    payload = len(raw) - header_len
    need = count * dtype.itemsize
    if payload < need:
        raise TruncatedPayloadError(f"payload has {payload} bytes, header {dims} needs {need}")
    if payload > need:
        raise IdxFormatError(f"{payload - need} trailing bytes after the IDX payload")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=header_len)
    return arr.astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">I", (code << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=IDX_TYPES[code]).tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    data = encode_idx(arr)
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def load_idx_images(path) -> np.ndarray:
    """(N, rows, cols) uint8 images from an IDX3 file (magic 0x00000803)."""
    return read_idx(path, IMAGES_MAGIC)


def load_idx_labels(path) -> np.ndarray:
    """(N,) uint8 labels from an IDX1 file (magic 0x00000801)."""
    return read_idx(path, LABELS_MAGIC)


def normalize(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i holds the two bilinear taps for output sample i, corners aligned
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def resize_bilinear(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes with corner-aligned bilinear interpolation."""
    images = np.asarray(images)
    if images.ndim < 2:
        raise DimensionError(f"need at least 2 axes to resize, got shape {images.shape}")
    rows = _interp_matrix(images.shape[-2], height)
    cols = _interp_matrix(images.shape[-1], width)
    out = np.einsum("ij,...jk,lk->...il", rows, images.astype(np.float64), cols, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32) if images.dtype != np.float64 else out


def resize_28_to_32(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.shape[-2:] != (28, 28):
        raise DimensionError(f"expected 28x28 images on the last two axes, got {images.shape}")
    return resize_bilinear(images, 32, 32)


@dataclass
class Dataset:
    """Labeled images in [0, 1] with shape (N, C, H, W)."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    source: str = "mnist"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ConfigError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices)
        if indices.size == 0:
            indices = indices.astype(np.intp)
        return Dataset(self.images[indices], self.labels[indices], split or self.split, self.source)


def preprocess(raw_images: np.ndarray) -> np.ndarray:
    """uint8 (N, 28, 28) -> float32 (N, 1, 32, 32) in [0, 1]."""
    return resize_28_to_32(normalize(raw_images))[:, None]


def find_idx_file(data_dir, stem: str) -> Path:
    data_dir = Path(data_dir)
    prefix, kind = stem.split("-", 1)
    kind_dotted = kind.replace("-idx", ".idx")
    for name in (stem, f"{prefix}-{kind_dotted}"):
        for candidate in (data_dir / name, data_dir / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"no {stem}[.gz] in {data_dir}")


def load_corpus(data_dir, source: str = "mnist", split: str = "train") -> Dataset:
    """Load and preprocess the ``train`` (60k) or ``test`` (10k) corpus from ``data_dir``."""
    if source not in SOURCES:
        raise ConfigError(f"unknown dataset {source!r}; expected one of {SOURCES}")
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ConfigError(f"corpus split must be 'train' or 'test', got {split!r}")
    raw = load_idx_images(find_idx_file(data_dir, f"{prefix}-images-idx3-ubyte"))
    labels = load_idx_labels(find_idx_file(data_dir, f"{prefix}-labels-idx1-ubyte"))
    if len(raw) != len(labels):
        raise IdxFormatError(f"{len(raw)} images but {len(labels)} labels in {data_dir}")
    return Dataset(preprocess(raw), labels, split, source)


def stratified_subset(dataset: Dataset, n: int) -> Dataset:
    """First ``n // 10`` images of each class in file order (remainder to the lowest classes)."""
    if n < 1:
        raise ConfigError(f"subset size must be positive, got {n}")
    if n >= len(dataset):
        return dataset
    per_class = [n // NUM_CLASSES + (1 if k < n % NUM_CLASSES else 0) for k in range(NUM_CLASSES)]
    picked = []
    for k in range(NUM_CLASSES):
        idx = np.flatnonzero(dataset.labels == k)[: per_class[k]]
        if len(idx) < per_class[k]:
            raise ConfigError(f"class {k} has only {len(idx)} images, {per_class[k]} requested")
        picked.append(idx)
    return dataset.subset(np.sort(np.concatenate(picked)))


def split_sizes(n: int) -> tuple[int, int]:
    """Train/validation sizes keeping the 50,000 : 10,000 ratio; the validation count is floored."""
    val = n // 6
    return n - val, val


def split(corpus: Dataset, seed: int = 0) -> tuple[Dataset, Dataset]:
    n_train, _ = split_sizes(len(corpus))
    perm = np.random.default_rng(seed).permutation(len(corpus))
    return corpus.subset(np.sort(perm[:n_train]), "train"), corpus.subset(np.sort(perm[n_train:]), "val")


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True, drop_last: bool = False):
    """Index arrays of one epoch; the permutation is drawn from ``default_rng([seed, epoch])``."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    return [order[i : i + batch_size] for i in range(0, stop, batch_size)]


@dataclass
class BatchIterator:
    """Seeded mini-batches; each epoch draws a fresh permutation of all indices.

    Iterating the object yields ``(images, labels)`` for the next epoch.  The
    final short batch is served.
    """

    dataset: Dataset
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True
    drop_last: bool = False
    epoch: int = field(default=0, init=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def batch_indices(self, epoch: int) -> list[np.ndarray]:
        return epoch_batches(len(self.dataset), self.batch_size, self.seed, epoch, self.shuffle, self.drop_last)

    def __len__(self) -> int:
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        batches = self.batch_indices(self.epoch)
        self.epoch += 1
        for idx in batches:
            yield self.dataset.images[idx], self.dataset.labels[idx]


def make_batches(dataset: Dataset, batch_size: int = 64, seed: int = 0, shuffle: bool = True) -> BatchIterator:
    return BatchIterator(dataset, batch_size, seed, shuffle)
