"""Synthetic multi-class image data for desk-scale training runs.

Each class is a coarse per-channel block pattern upsampled to full
resolution; samples add i.i.d. Gaussian pixel noise on top. Patterns depend
only on SyntheticSpec.seed, so train and test splits share class structure while
drawing disjoint noise streams. Generation is byte-identical across runs.
"""

from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import CheckpointError, ConfigError, ContractError

_MAGIC = b"DSDS"
_VERSION = 1
_SPLIT_CODES = {"train": 1, "test": 2}


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    channels: int = 3
    height: int = 32
    width: int = 32
    coarse: int = 4
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.height % self.coarse or self.width % self.coarse:
            raise ConfigError(
                f"coarse grid {self.coarse} must divide {self.height}x{self.width}"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")


@dataclass
class Dataset:
    spec: SyntheticSpec
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return self.images.shape[0]


def class_patterns(spec: SyntheticSpec) -> np.ndarray:
    """[classes, C, H, W] unit-std block patterns, a function of spec.seed only."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    raw = rng.standard_normal((spec.classes, spec.channels, spec.coarse, spec.coarse))
    raw /= raw.std(axis=(1, 2, 3), keepdims=True)
    bh = spec.height // spec.coarse
    bw = spec.width // spec.coarse
    return np.kron(raw, np.ones((1, 1, bh, bw)))


def generate_split(spec: SyntheticSpec, count: int, split: str) -> Dataset:
    if split not in _SPLIT_CODES:
        raise ContractError(f"split must be one of {sorted(_SPLIT_CODES)}, got {split!r}")
    if count < 1:
        raise ContractError(f"count must be positive, got {count}")
    patterns = class_patterns(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SPLIT_CODES[split]]))
    labels = (np.arange(count) % spec.classes).astype(np.int64)
    labels = labels[rng.permutation(count)]
    images = patterns[labels].astype(np.float32)
    if spec.noise > 0:
        images = images + spec.noise * rng.standard_normal(images.shape).astype(np.float32)
    return Dataset(spec=spec, images=images.astype(np.float32), labels=labels)


def channel_stats(images: np.ndarray):
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def iter_batches(images: np.ndarray, labels: np.ndarray, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (images, labels) minibatches; shuffled when an rng is given."""
    n = images.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield images[idx], labels[idx]


# -- binary container ---------------------------------------------------------


def serialize_dataset(ds: Dataset) -> bytes:
    spec = ds.spec
    if ds.images.dtype != np.float32 or ds.labels.dtype != np.int64:
        raise ContractError("dataset container stores float32 images and int64 labels")
    head = _MAGIC + struct.pack(
        "<IIIIIIIdq",
        _VERSION,
        ds.images.shape[0],
        spec.classes,
        spec.channels,
        spec.height,
        spec.width,
        spec.coarse,
        spec.noise,
        spec.seed,
    )
    body = head + ds.labels.astype("<i8").tobytes() + ds.images.astype("<f4").tobytes()
    return body + struct.pack("<I", binascii.crc32(body) & 0xFFFFFFFF)


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_dataset(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 4:
        raise CheckpointError(f"dataset file {path} is truncated")
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"bad dataset magic {blob[:4]!r}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if binascii.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"dataset file {path} failed its integrity check")
    header_fmt = "<IIIIIIIdq"
    header_size = struct.calcsize(header_fmt)
    version, count, classes, channels, height, width, coarse, noise, seed = struct.unpack(
        header_fmt, blob[4 : 4 + header_size]
    )
    if version != _VERSION:
        raise CheckpointError(f"unsupported dataset version {version}")
    spec = SyntheticSpec(
        classes=classes, channels=channels, height=height, width=width, coarse=coarse, noise=noise, seed=seed
    )
    off = 4 + header_size
    labels_bytes = count * 8
    image_bytes = count * channels * height * width * 4
    if len(blob) != off + labels_bytes + image_bytes + 4:
        raise CheckpointError(f"dataset file {path} has inconsistent payload size")
    labels = np.frombuffer(blob, dtype="<i8", count=count, offset=off).astype(np.int64)
    images = np.frombuffer(blob, dtype="<f4", count=count * channels * height * width, offset=off + labels_bytes)
    images = images.reshape(count, channels, height, width).astype(np.float32)
    return Dataset(spec=spec, images=images, labels=labels)
