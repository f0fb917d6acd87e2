"""MNIST IDX parsing, batching and the fixed attack subset."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "LabeledDataset",
    "IdxError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "read_idx",
    "write_idx",
    "load_idx",
    "load_mnist",
    "batches",
    "attack_subset",
    "mnist_root",
    "find_file",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATA_ENV = "TRANSFERLAB_DATA"

# IDX type byte -> (numpy big-endian dtype)
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x 1 x H x W, float32 in [0, 1]
    labels: np.ndarray  # N, int64 in [0, 10)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> LabeledDataset:
        return LabeledDataset(self.images[index], self.labels[index])


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix in (".gz", ".gzip") else open(path, "rb")


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Read any IDX file into an array of its declared type and shape."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: no IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise IdxMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    type_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 or type_code not in _IDX_TYPES:
        raise IdxMagicError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header declares {ndim} dims but file ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[type_code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {need}")
    return np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    """Write ``array`` as IDX; uint8 stays ubyte, floats are stored as big-endian float32."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code, payload = 0x08, arr.astype(">u1")
    elif np.issubdtype(arr.dtype, np.floating):
        code, payload = 0x0D, arr.astype(">f4")
    elif np.issubdtype(arr.dtype, np.integer):
        code, payload = 0x0C, arr.astype(">i4")
    else:
        raise TypeError(f"cannot store dtype {arr.dtype} as IDX")
    header = struct.pack(">I", (code << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + payload.tobytes())
    return path


def load_idx(images_path, labels_path, pad: int = 0) -> LabeledDataset:
    """Load an image/label IDX pair, scale pixels by 1/255 and zero-pad ``pad`` pixels per side."""
    raw_images = read_idx(images_path, IMAGES_MAGIC)
    raw_labels = read_idx(labels_path, LABELS_MAGIC)
    if len(raw_images) != len(raw_labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(raw_images)} images but {labels_path} holds {len(raw_labels)} labels"
        )
    images = raw_images.astype(np.float32) / np.float32(255.0)
    images = images[:, None, :, :]
    if pad:
        images = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return LabeledDataset(np.ascontiguousarray(images), raw_labels.astype(np.int64))


def mnist_root(root=None) -> Path:
    if root is None:
        root = os.environ.get(DATA_ENV)
    if root is None:
        raise FileNotFoundError(f"no MNIST directory given and ${DATA_ENV} is unset")
    return Path(root)


def find_file(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{root / stem}[.gz] not found")


def load_mnist(root=None, split: str = "test", pad: int = 0) -> LabeledDataset:
    root = mnist_root(root)
    img, lab = MNIST_FILES[split]
    return load_idx(find_file(root, img), find_file(root, lab), pad=pad)


def batches(
    dataset: LabeledDataset, batch_size: int, shuffle_seed: int | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) mini-batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def attack_subset(dataset: LabeledDataset, size: int = 1000) -> LabeledDataset:
    """The first ``size`` samples in file order."""
    return dataset.subset(slice(0, min(size, len(dataset))))
