"""Datasets, the CIFAR binary reader, augmentation and deterministic batching."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

CIFAR_IMAGE_BYTES = 3 * 32 * 32
SYNTH_MAGIC = b"SNASDAT1"


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label per image")
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalize(self, images: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return images
        return (images - self.mean[:, None, None]) / self.std[:, None, None]

    def batches(self, batch_size: int):
        """Normalized (images, labels) batches in storage order, without augmentation."""
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            yield self.normalize(self.images[sl]), self.labels[sl]


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset
    calib: Dataset
    templates: Optional[np.ndarray] = None  # synthetic class templates, when known

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.train.shape


def split_dataset(images: np.ndarray, labels: np.ndarray, num_classes: int, seed: int,
                  fractions=(0.8, 0.1, 0.1)) -> DatasetSplits:
    """Stratified, seeded train/val/calib split; normalization from the train part."""
    rng = np.random.default_rng([seed, 1])
    parts: dict[str, list] = {"train": [], "val": [], "calib": []}
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr:n_tr + n_va])
        parts["calib"].append(idx[n_tr + n_va:])
    out = {}
    for name, chunks in parts.items():
        if sum(len(ch) for ch in chunks) == 0:
            raise ValueError(f"too few examples per class to fill the {name} split")
        # interleave classes so any prefix is roughly balanced
        idx = np.concatenate(chunks)
        idx = idx[np.argsort(np.concatenate([np.arange(len(ch)) for ch in chunks]), kind="stable")]
        out[name] = idx
    train_imgs = images[out["train"]]
    mean = train_imgs.mean(axis=(0, 2, 3))
    std = train_imgs.std(axis=(0, 2, 3)) + 1e-8
    return DatasetSplits(*(
        Dataset(images[out[s]], labels[out[s]], s, num_classes, mean, std) for s in ("train", "val", "calib")
    ))


def synth_dataset(seed: int, n_per_class: int, num_classes: int, shape=(3, 8, 8),
                  noise: float = 0.35, max_shift: int = 1) -> DatasetSplits:
    """Seeded class-conditional images: a random smooth template per class,
    randomly shifted, contrast-jittered and corrupted by Gaussian noise."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng([seed, 0])
    C, H, W = shape
    raw = rng.normal(size=(num_classes, C, H, W))
    templates = ndimage.gaussian_filter(raw, sigma=(0, 0, 0.8, 0.8), mode="wrap")
    templates -= templates.mean(axis=(1, 2, 3), keepdims=True)
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    n = len(labels)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    gain = rng.uniform(0.6, 1.0, size=n)
    imgs = np.empty((n, C, H, W))
    for k in range(n):
        t = np.roll(templates[labels[k]], tuple(shifts[k]), axis=(1, 2))
        imgs[k] = 0.5 + 0.25 * gain[k] * t
    imgs += noise * 0.25 * rng.normal(size=imgs.shape)
    np.clip(imgs, 0.0, 1.0, out=imgs)
    splits = split_dataset(imgs, labels, num_classes, seed)
    splits.templates = 0.5 + 0.25 * templates  # kept for the template-matching oracle
    return splits


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def load_cifar_binary(path, variant: str = "c10") -> Dataset:
    """Parse a CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine label bytes) file."""
    if variant not in ("c10", "c100"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    label_bytes = 1 if variant == "c10" else 2
    record = label_bytes + CIFAR_IMAGE_BYTES
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise DataFormatError("empty CIFAR file", 0)
    n, rem = divmod(len(raw), record)
    if rem:
        raise DataFormatError(
            f"truncated record {n}: expected {record} bytes, found {rem}", n * record
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    images = arr[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    num_classes = 10 if variant == "c10" else 100
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DataFormatError(f"label {labels[bad]} out of range", bad * record)
    return Dataset(images, labels, "train", num_classes)


def save_dataset(splits: DatasetSplits, path) -> None:
    """Cache a dataset to one file: magic, header length, JSON-free header, arrays, digest."""
    body = bytearray()
    for ds in (splits.train, splits.val, splits.calib):
        n, c, h, w = ds.images.shape
        body += struct.pack("<5I", n, c, h, w, ds.num_classes)
        body += ds.images.astype("<f8").tobytes()
        body += ds.labels.astype("<i8").tobytes()
    body += splits.train.mean.astype("<f8").tobytes() + splits.train.std.astype("<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    Path(path).write_bytes(SYNTH_MAGIC + struct.pack("<Q", len(body)) + bytes(body) + digest)


def load_dataset(path) -> DatasetSplits:
    raw = Path(path).read_bytes()
    if raw[:8] != SYNTH_MAGIC:
        raise DataFormatError("not a cached dataset (bad magic or version)", 0)
    (size,) = struct.unpack_from("<Q", raw, 8)
    body = raw[16:16 + size]
    if len(body) != size or hashlib.sha256(body).digest() != raw[16 + size:16 + size + 32]:
        raise DataFormatError("dataset cache checksum mismatch", 16)
    off = 0
    parts = []
    for split in ("train", "val", "calib"):
        n, c, h, w, k = struct.unpack_from("<5I", body, off)
        off += 20
        imgs = np.frombuffer(body, "<f8", n * c * h * w, off).reshape(n, c, h, w).copy()
        off += 8 * n * c * h * w
        labels = np.frombuffer(body, "<i8", n, off).copy()
        off += 8 * n
        parts.append((imgs, labels, split, k))
    c = parts[0][0].shape[1]
    mean = np.frombuffer(body, "<f8", c, off).copy()
    std = np.frombuffer(body, "<f8", c, off + 8 * c).copy()
    return DatasetSplits(*(Dataset(i, l, s, k, mean, std) for i, l, s, k in parts))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    brightness_delta_max: float = 0.2
    contrast_range: tuple[float, float] = (0.8, 1.2)
    rotation_deg_max: float = 15.0
    hflip_prob: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a CHW image about its centre, bilinear, zero padding."""
    if degrees == 0.0:
        return image.copy()
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    mat = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    centre = (np.array(image.shape) - 1) / 2.0
    offset = centre - mat @ centre
    return ndimage.affine_transform(image, mat, offset=offset, order=1, mode="constant", cval=0.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def augment(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Brightness, contrast, rotation and horizontal flip, clamped to [0, 1].

    Draws a fixed number of variates so the stream position never depends
    on which transforms are enabled.
    """
    u = rng.uniform(size=4)
    out = image + policy.brightness_delta_max * (2 * u[0] - 1)
    lo, hi = policy.contrast_range
    factor = lo + (hi - lo) * u[1]
    mean = out.mean()
    out = (out - mean) * factor + mean
    out = rotate(out, policy.rotation_deg_max * (2 * u[2] - 1))
    if u[3] < policy.hflip_prob:
        out = hflip(out)
    return np.clip(out, 0.0, 1.0)


@dataclass
class BatchStream:
    """Deterministic training batches indexed by iteration.

    Batch ``t`` comes from the epoch permutation seeded by ``(seed, epoch)``
    and each sample's augmentation stream is keyed by ``(seed, epoch,
    index)``, so any iteration can be regenerated in isolation.
    """

    dataset: Dataset
    batch_size: int
    seed: int = 0
    policy: Optional[AugmentPolicy] = None

    def __post_init__(self):
        if self.batch_size > len(self.dataset):
            self.batch_size = len(self.dataset)
        self.steps_per_epoch = len(self.dataset) // self.batch_size

    def batch(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        epoch, k = divmod(t, self.steps_per_epoch)
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))
        idx = perm[k * self.batch_size:(k + 1) * self.batch_size]
        imgs = self.dataset.images[idx]
        if self.policy is not None:
            imgs = np.stack([
                augment(img, np.random.default_rng([self.seed, epoch, int(i)]), self.policy)
                for img, i in zip(imgs, idx)
            ])
        return self.dataset.normalize(imgs), self.dataset.labels[idx]
