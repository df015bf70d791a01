"""Datasets: MNIST-style IDX files, the bundled 8x8 digits, and synthetic blobs.

Inputs are stored flattened, one row per example. Standardisation follows the
single-channel pixel convention (zero mean, unit std over the training split),
so attack radii and smoothing scales are in units of pixel standard deviations.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_ENV = "ROBUST_SALIENCY_CACHE"


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, n) float64
    labels: np.ndarray  # (N,) int64
    image_shape: Optional[tuple] = None  # (rows, cols) when the inputs are images
    mean: float = 0.0
    std: float = 1.0
    n_classes: Optional[int] = None

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D (examples x features) array")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")
        if self.image_shape is not None and math.prod(self.image_shape) != self.inputs.shape[1]:
            raise ValueError(f"image shape {self.image_shape} does not match {self.inputs.shape[1]} features")
        if self.n_classes is not None and len(self.labels) and (
                self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside the class range")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])

    def raw(self) -> np.ndarray:
        """Inputs mapped back to the unstandardised [0, 1] pixel scale."""
        return self.inputs * self.std + self.mean

    def box(self) -> tuple[float, float]:
        """Per-feature bounds of valid images in the current units."""
        return (0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std


def _read_header(data: bytes, path, magic: int, ndim: int):
    if len(data) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header ({len(data)} bytes)")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndim}I", data, 4)


def load_idx(images_path, labels_path, standardize: bool = True,
             stats: Optional[tuple] = None) -> Dataset:
    """Parse a pair of big-endian IDX files (images 0x803, labels 0x801).

    Pixel bytes are mapped to [0, 1]. With ``standardize`` the inputs are
    shifted and scaled by ``stats=(mean, std)``, or by the file's own pixel
    statistics when ``stats`` is None.
    """
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    count, rows, cols = _read_header(img, images_path, IDX_IMAGES_MAGIC, 3)
    (lcount,) = _read_header(lab, labels_path, IDX_LABELS_MAGIC, 1)
    if count != lcount:
        raise IDXFormatError(f"{count} images but {lcount} labels")
    need = 16 + count * rows * cols
    if len(img) < need:
        raise IDXFormatError(f"{images_path}: truncated pixel data at offset {len(img)}, need {need} bytes")
    if len(lab) < 8 + count:
        raise IDXFormatError(f"{labels_path}: truncated label data at offset {len(lab)}, need {8 + count} bytes")
    pixels = np.frombuffer(img, np.uint8, count * rows * cols, 16).reshape(count, rows * cols)
    labels = np.frombuffer(lab, np.uint8, count, 8).astype(np.int64)
    ds = Dataset(pixels.astype(float) / 255.0, labels, image_shape=(rows, cols))
    if standardize:
        ds = standardize_dataset(ds, stats)
    return ds


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write raw [0, 1] pixels (rounded to bytes) and labels as IDX files."""
    if dataset.image_shape is None:
        raise ValueError("IDX images need an image shape")
    rows, cols = dataset.image_shape
    pixels = np.clip(np.rint(dataset.raw() * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def standardize_dataset(dataset: Dataset, stats: Optional[tuple] = None) -> Dataset:
    """Zero-mean, unit-std single-channel standardisation of raw [0, 1] pixels."""
    raw = dataset.raw()
    if stats is None:
        mean = float(raw.mean()) if raw.size else 0.0
        std = float(raw.std()) if raw.size else 1.0
    else:
        mean, std = stats
    if not std > 0:
        raise ValueError("cannot standardise a constant dataset")
    return replace(dataset, inputs=(raw - mean) / std, mean=mean, std=std)


def downsample(dataset: Dataset, factor: int) -> Dataset:
    """Block-mean pooling of square blocks of side ``factor``."""
    if dataset.image_shape is None:
        raise ValueError("downsampling needs an image shape")
    rows, cols = dataset.image_shape
    if factor < 1 or rows % factor or cols % factor:
        raise ValueError(f"image {rows}x{cols} is not divisible by factor {factor}")
    imgs = dataset.inputs.reshape(len(dataset), rows // factor, factor, cols // factor, factor)
    pooled = imgs.mean(axis=(2, 4)).reshape(len(dataset), -1)
    return replace(dataset, inputs=pooled, image_shape=(rows // factor, cols // factor))


def synth_blobs(classes: int, samples_per_class: int, dims: int, separation: float,
                seed: int = 0, blob_std: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs; neighbouring class centres sit ``separation`` apart.

    Centres lie on a circle in the first two coordinates (on a line when
    ``dims == 1``), so they do not depend on the seed.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    centers = np.zeros((classes, dims))
    if dims == 1 or classes < 3:
        centers[:, 0] = (np.arange(classes) - (classes - 1) / 2.0) * separation
    else:
        radius = separation / (2.0 * math.sin(math.pi / classes))
        angles = 2.0 * math.pi * np.arange(classes) / classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), samples_per_class)
    inputs = centers[labels] + blob_std * rng.standard_normal((labels.size, dims))
    return Dataset(inputs, labels.astype(np.int64), n_classes=classes)


def cache_dir() -> Path:
    path = Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "robust_saliency"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def digits_idx_paths() -> tuple[Path, Path]:
    """IDX copies of scikit-learn's bundled 8x8 digits, written to the cache once."""
    images, labels = cache_dir() / "digits-images.idx3-ubyte", cache_dir() / "digits-labels.idx1-ubyte"
    if not (images.exists() and labels.exists()):
        from sklearn.datasets import load_digits

        bunch = load_digits()
        raw = Dataset(bunch.data / 16.0, bunch.target.astype(np.int64), image_shape=(8, 8))
        write_idx(raw, images, labels)
    return images, labels


def load_digits_split(test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Train/test split of the 8x8 digits, standardised with training statistics."""
    full = load_idx(*digits_idx_paths(), standardize=False)
    order = np.random.default_rng(seed).permutation(len(full))
    n_test = int(round(test_fraction * len(full)))
    train, test = full.subset(order[n_test:]), full.subset(order[:n_test])
    train = replace(standardize_dataset(train), n_classes=10)
    test = replace(standardize_dataset(test, (train.mean, train.std)), n_classes=10)
    return train, test
