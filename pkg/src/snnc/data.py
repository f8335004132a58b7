"""Dataset loading (MNIST IDX, CIFAR-10 binary), deterministic batching
and subsetting, plus a self-contained synthetic digit set for desk-scale
experiments without external files."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .mathops import SeededRng

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass(frozen=True)
class Dataset:
    """Labeled images: (count, channels, H, W) float64 pixels in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    n_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(
                f"{images.shape[0]} images but {labels.shape} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name,
                       self.n_classes)


def _read_be32(data: bytes, off: int, what: str) -> int:
    if off + 4 > len(data):
        raise FormatError(f"truncated file: missing {what}")
    return struct.unpack(">i", data[off:off + 4])[0]


def _load_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = _read_be32(data, 0, "image magic")
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad image magic {magic} in {path} "
                          f"(expected {IDX_IMAGE_MAGIC})")
    count = _read_be32(data, 4, "image count")
    rows = _read_be32(data, 8, "row count")
    cols = _read_be32(data, 12, "column count")
    if min(count, rows, cols) < 0:
        raise FormatError(f"negative dimension in {path} header")
    need = count * rows * cols
    body = data[16:]
    if len(body) != need:
        raise FormatError(f"pixel payload of {path} has {len(body)} bytes, "
                          f"header promises {need}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)
    return pixels


def _load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = _read_be32(data, 0, "label magic")
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad label magic {magic} in {path} "
                          f"(expected {IDX_LABEL_MAGIC})")
    count = _read_be32(data, 4, "label count")
    body = data[8:]
    if len(body) != count:
        raise FormatError(f"label payload of {path} has {len(body)} bytes, "
                          f"header promises {count}")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write (N, H, W) uint8 pixels in IDX image format."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _idx_pair(dirpath, images_name, labels_name, set_name) -> Dataset:
    images = _load_idx_images(os.path.join(dirpath, images_name))
    labels = _load_idx_labels(os.path.join(dirpath, labels_name))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{set_name}: {images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"{set_name}: label {labels.max()} out of range 0..9")
    scaled = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(scaled, labels, set_name)


def load_mnist(dirpath) -> tuple[Dataset, Dataset]:
    """Parse the four classic IDX files under dirpath, pixels scaled 1/255."""
    train = _idx_pair(dirpath, "train-images-idx3-ubyte",
                      "train-labels-idx1-ubyte", "mnist-train")
    test = _idx_pair(dirpath, "t10k-images-idx3-ubyte",
                     "t10k-labels-idx1-ubyte", "mnist-test")
    return train, test


def _load_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % CIFAR_RECORD_BYTES:
        raise FormatError(f"{path} length {len(data)} is not a multiple of "
                          f"{CIFAR_RECORD_BYTES}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def write_cifar10_batch(path, images: np.ndarray, labels) -> None:
    """Write (N, 3, 32, 32) uint8 pixels in the CIFAR-10 binary layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        for img, lab in zip(images, labels):
            fh.write(bytes([int(lab)]))
            fh.write(img.tobytes())


def load_cifar10(dirpath) -> tuple[Dataset, Dataset]:
    """Parse the binary-version batch files (data_batch_1..5, test_batch)."""
    imgs, labs = [], []
    for i in range(1, 6):
        path = os.path.join(dirpath, f"data_batch_{i}.bin")
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 file {path}")
        im, la = _load_cifar_file(path)
        imgs.append(im)
        labs.append(la)
    train = Dataset(np.concatenate(imgs).astype(np.float64) / 255.0,
                    np.concatenate(labs), "cifar10-train")
    im, la = _load_cifar_file(os.path.join(dirpath, "test_batch.bin"))
    test = Dataset(im.astype(np.float64) / 255.0, la, "cifar10-test")
    return train, test


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int):
    """Seeded shuffle, then consecutive batches; the final partial batch is
    kept.  Together the batches partition the dataset exactly."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = SeededRng(shuffle_seed).generator().permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Seeded sample without replacement, stratified per class (largest
    remainder) so every class present in the data stays represented."""
    if n > len(dataset):
        raise ValueError(f"cannot take {n} of {len(dataset)} examples")
    if n == len(dataset):
        return dataset
    gen = SeededRng(seed).generator()
    classes, counts = np.unique(dataset.labels, return_counts=True)
    quotas = counts * (n / len(dataset))
    base = np.floor(quotas).astype(int)
    rest = n - base.sum()
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:rest]] += 1
    picked = []
    for cls, take in zip(classes, base):
        pool = np.flatnonzero(dataset.labels == cls)
        picked.append(gen.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(picked))
    return dataset.take(idx)


# ---------------------------------------------------------------------------
# Synthetic digits: seven-segment glyphs with position jitter, box blur and
# pixel noise.  Classes share segments (8 vs 0 vs 9 differ by one or two), so
# decision margins stay adversarially interesting while a small CNN learns
# the task within a few epochs.
# ---------------------------------------------------------------------------

_GLYPH_H, _GLYPH_W, _STROKE = 24, 16, 3
_SEGMENTS = {
    "A": (slice(0, _STROKE), slice(1, _GLYPH_W - 1)),
    "B": (slice(1, _GLYPH_H // 2), slice(_GLYPH_W - _STROKE, _GLYPH_W)),
    "C": (slice(_GLYPH_H // 2, _GLYPH_H - 1), slice(_GLYPH_W - _STROKE, _GLYPH_W)),
    "D": (slice(_GLYPH_H - _STROKE, _GLYPH_H), slice(1, _GLYPH_W - 1)),
    "E": (slice(_GLYPH_H // 2, _GLYPH_H - 1), slice(0, _STROKE)),
    "F": (slice(1, _GLYPH_H // 2), slice(0, _STROKE)),
    "G": (slice(_GLYPH_H // 2 - _STROKE // 2,
                _GLYPH_H // 2 - _STROKE // 2 + _STROKE),
          slice(1, _GLYPH_W - 1)),
}
_DIGIT_SEGMENTS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FGBC",
    5: "AFGCD", 6: "AFGECD", 7: "ABC", 8: "ABCDEFG", 9: "ABCDFG",
}


def _glyph(digit: int) -> np.ndarray:
    g = np.zeros((_GLYPH_H, _GLYPH_W))
    for seg in _DIGIT_SEGMENTS[digit]:
        rs, cs = _SEGMENTS[seg]
        g[rs, cs] = 1.0
    return g


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1)
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += padded[di:di + img.shape[0], dj:dj + img.shape[1]]
    return out / 9.0


def synthetic_digits(n_train: int, n_test: int, seed: int = 0,
                     noise: float = 0.13, amplitude: float = 0.85,
                     side: int = 28) -> tuple[Dataset, Dataset]:
    """Deterministic ten-class digit images at MNIST geometry."""
    glyphs = [_glyph(d) for d in range(10)]
    gen = SeededRng(seed).generator()

    def build(count, tag):
        images = np.zeros((count, 1, side, side))
        labels = gen.integers(0, 10, size=count)
        base_r = (side - _GLYPH_H) // 2
        base_c = (side - _GLYPH_W) // 2
        for i in range(count):
            canvas = np.zeros((side, side))
            dr = int(gen.integers(-2, 3))
            dc = int(gen.integers(-3, 4))
            r0 = min(max(base_r + dr, 0), side - _GLYPH_H)
            c0 = min(max(base_c + dc, 0), side - _GLYPH_W)
            canvas[r0:r0 + _GLYPH_H, c0:c0 + _GLYPH_W] = \
                amplitude * glyphs[labels[i]]
            canvas = _box_blur(canvas)
            canvas += gen.normal(0.0, noise, size=canvas.shape)
            images[i, 0] = np.clip(canvas, 0.0, 1.0)
        return Dataset(images, labels, tag)

    return build(n_train, "synth-train"), build(n_test, "synth-test")


def materialize_idx(dirpath, train: Dataset, test: Dataset) -> None:
    """Write two datasets as the four MNIST-layout IDX files, 8-bit pixels."""
    os.makedirs(dirpath, exist_ok=True)
    for ds, img_name, lab_name in (
            (train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            (test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")):
        pixels = np.round(ds.images[:, 0] * 255.0).astype(np.uint8)
        write_idx_images(os.path.join(dirpath, img_name), pixels)
        write_idx_labels(os.path.join(dirpath, lab_name), ds.labels)
