"""IDX image files, pooling, binarization and the on-disk dataset cache."""
from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload; images come back scaled to [0, 1]."""
    if len(raw) < 4:
        raise IdxFormatError(f"file too short for an IDX header ({len(raw)} bytes)")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxFormatError(f"bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated header: expected {header} bytes, got {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise IdxFormatError(f"payload has {actual} bytes, expected {expected} for dims {dims}")
    values = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if magic == IDX_LABELS:
        return values.astype(np.int64)
    return values.reshape(dims[0], -1).astype(np.float64) / 255.0


def load_idx(path) -> np.ndarray:
    """Images as ``(n, rows*cols)`` floats in [0, 1], or labels as int64.

    Files ending in ``.gz`` are decompressed transparently.
    """
    return parse_idx(_read_bytes(path))


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX: 3-d arrays as images, 1-d as labels."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer handles label vectors and (n, rows, cols) images")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    header = magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def average_pool(images: np.ndarray, factor: int) -> np.ndarray:
    n, d = images.shape
    side = int(round(np.sqrt(d)))
    if side * side != d:
        raise ValueError(f"images of {d} pixels are not square")
    if factor < 1 or side % factor:
        raise ValueError(f"pooling factor {factor} does not divide side length {side}")
    s = side // factor
    return images.reshape(n, s, factor, s, factor).mean(axis=(2, 4)).reshape(n, s * s)


def binarize(greys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(greys.shape) < greys).astype(np.float64)


@dataclass
class BinarizedImageDataset:
    """Greyscale pixels with fixed-binarized validation/test splits.

    Training rows are re-binarized on every access when ``dynamic``;
    otherwise they are binarized once like the held-out splits.
    """

    train_greys: np.ndarray
    val: np.ndarray
    test: np.ndarray
    dynamic: bool = True
    seed: int = 0
    train_fixed: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.train_greys.shape[1]

    @property
    def n_train(self) -> int:
        return len(self.train_greys)

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        order = rng.permutation(self.n_train)
        for lo in range(0, self.n_train, batch_size):
            idx = order[lo:lo + batch_size]
            if self.dynamic:
                yield binarize(self.train_greys[idx], rng)
            else:
                yield self.train_fixed[idx]


def downsample_binarize(train_images: np.ndarray, factor: int, rng: np.random.Generator,
                        dynamic: bool = True, test_images: np.ndarray | None = None,
                        val_fraction: float = 0.1, seed: int = 0) -> BinarizedImageDataset:
    """Pool by ``factor``; hold out the last ``val_fraction`` of the training
    file (file order) as validation.  Held-out splits use a fixed seed."""
    train = average_pool(np.asarray(train_images, dtype=np.float64), factor)
    n_val = int(round(val_fraction * len(train)))
    n_train = len(train) - n_val
    fixed = np.random.default_rng(seed)
    val = binarize(train[n_train:], fixed)
    test = binarize(average_pool(test_images, factor), fixed) if test_images is not None \
        else np.zeros((0, train.shape[1]))
    train_fixed = None if dynamic else binarize(train[:n_train], rng)
    return BinarizedImageDataset(train[:n_train], val, test, dynamic, seed, train_fixed)


def save_cache(dataset: BinarizedImageDataset, directory) -> None:
    """Raw little-endian f64 arrays plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train_greys", "val", "test"):
        getattr(dataset, name).astype("<f8").tofile(directory / f"{name}.f64")
    manifest = {"d": dataset.dim, "n_train": dataset.n_train, "n_val": len(dataset.val),
                "n_test": len(dataset.test), "seed": dataset.seed}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_cache(directory, dynamic: bool = True) -> BinarizedImageDataset:
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    d = meta["d"]

    def read(name, n):
        arr = np.fromfile(directory / f"{name}.f64", dtype="<f8")
        if arr.size != n * d:
            raise IdxFormatError(f"{name}: expected {n * d} values, found {arr.size}")
        return arr.reshape(n, d).astype(np.float64)

    train = read("train_greys", meta["n_train"])
    ds = BinarizedImageDataset(train, read("val", meta["n_val"]), read("test", meta["n_test"]),
                               dynamic, meta["seed"])
    if not dynamic:
        ds.train_fixed = binarize(train, np.random.default_rng(meta["seed"] + 1))
    return ds


def load_digits_dir(directory, factor: int, dynamic: bool = True, seed: int = 0) -> BinarizedImageDataset:
    """Read ``train-images-idx3-ubyte[.gz]`` / ``t10k-images-idx3-ubyte[.gz]``."""
    directory = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise FileNotFoundError(os.fspath(directory / stem))

    train = load_idx(find("train-images-idx3-ubyte"))
    test = load_idx(find("t10k-images-idx3-ubyte"))
    return downsample_binarize(train, factor, np.random.default_rng(seed + 1), dynamic,
                               test_images=test, seed=seed)
