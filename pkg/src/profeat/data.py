"""Dataset ingestion, class-balanced splitting and deterministic batching.

Images are held as ``uint8`` arrays of shape ``N x H x W x C`` and only turned
into float tensors in ``[0, 1]`` (``N x C x H x W``) when batched, so the
attack radius and step sizes share the ``k/255`` convention.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

CIFAR_PIXELS = 32 * 32 * 3
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS

_CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}


class DataFormatError(ValueError):
    """Raised when a binary dataset file does not match its record layout."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # N x H x W x C, uint8
    labels: np.ndarray  # N, int64
    num_classes: int
    name: str = "dataset"
    ids: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DatasetError("images must be a uint8 array of shape N x H x W x C")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels)
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids)
        object.__setattr__(self, "ids", ids.astype(np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index: Sequence[int], name: Optional[str] = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            images=self.images[index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            name=name or self.name,
            ids=self.ids[index],
            metadata=dict(self.metadata),
        )

    def class_counts(self) -> list:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def to_batch(self, index: Optional[Sequence[int]] = None) -> "ImageBatch":
        if index is None:
            index = np.arange(len(self))
        index = np.asarray(index, dtype=np.int64)
        return ImageBatch(
            pixels=to_float(self.images[index]),
            labels=torch.from_numpy(self.labels[index]),
            ids=torch.from_numpy(self.ids[index]),
        )


@dataclass
class ImageBatch:
    """A batch of images in ``[0, 1]`` with optional labels and sample ids.

    ``ids`` identify samples across epochs; augmentations key their
    per-sample randomness on them.
    """

    pixels: torch.Tensor
    labels: Optional[torch.Tensor] = None
    ids: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise DatasetError("an ImageBatch needs at least one N x C x H x W image")
        if self.ids is None:
            self.ids = torch.arange(self.pixels.shape[0])

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        return ImageBatch(pixels=pixels, labels=self.labels, ids=self.ids)


def to_float(images: np.ndarray) -> torch.Tensor:
    """uint8 ``N x H x W x C`` -> float32 ``N x C x H x W`` in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)
    return x.float().div_(255.0)


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_float` for pixels lying on the 1/255 grid."""
    x = (pixels.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).contiguous().numpy()


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def decode_cifar(buf: bytes, variant: str) -> tuple:
    """Decode a CIFAR binary buffer into ``(images, labels)``.

    Each record is a label byte (CIFAR-100: coarse then fine) followed by
    1024 red, 1024 green and 1024 blue bytes in row-major order.
    """
    if variant == "cifar10":
        record, num_classes = CIFAR10_RECORD, 10
    elif variant == "cifar100":
        record, num_classes = CIFAR100_RECORD, 100
    else:
        raise DatasetError(f"unknown CIFAR variant {variant!r}; expected cifar10 or cifar100")
    if len(buf) == 0 or len(buf) % record:
        n = max(1, math.ceil(len(buf) / record))
        raise DataFormatError(
            f"{variant} file must be a multiple of {record} bytes per record; "
            f"expected {n * record} bytes for {n} records, got {len(buf)}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, record - CIFAR_PIXELS - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise DataFormatError(
            f"record {bad[0]} has label byte {labels[bad[0]]}, outside [0, {num_classes})"
        )
    images = raw[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def encode_cifar(images: np.ndarray, labels: np.ndarray, variant: str,
                 coarse_labels: Optional[np.ndarray] = None) -> bytes:
    """Serialize images and labels back to the CIFAR binary record layout."""
    planes = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    head = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == "cifar100":
        coarse = np.zeros(len(images), np.uint8) if coarse_labels is None else coarse_labels
        head.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    return np.concatenate(head + [planes], axis=1).tobytes()


def load_cifar(path, variant: str = "cifar10", split: str = "train") -> LabeledDataset:
    """Load a CIFAR binary batch file, or every batch file of ``split`` in a directory."""
    path = Path(path)
    if (variant, split) not in _CIFAR_FILES:
        raise DatasetError(f"unknown variant/split {variant}/{split}")
    files = [path / f for f in _CIFAR_FILES[(variant, split)]] if path.is_dir() else [path]
    images, labels = [], []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f)
        im, lb = decode_cifar(f.read_bytes(), variant)
        images.append(im)
        labels.append(lb)
    return LabeledDataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        num_classes=10 if variant == "cifar10" else 100,
        name=f"{variant}-{split}",
    )


# ---------------------------------------------------------------------------
# Synthetic toy data
# ---------------------------------------------------------------------------

TOY_STRIPE, TOY_CAST = 0.10, 0.08


@dataclass(frozen=True)
class ToySpec:
    num_classes: int = 4
    samples_per_class: int = 200
    image_size: int = 16
    margin: float = 1.0
    texture: float = 0.0


def _texture_colors(num_classes: int) -> np.ndarray:
    base = np.eye(3)
    extra = np.random.default_rng(7).normal(size=(max(num_classes - 3, 0), 3))
    colors = np.concatenate([base, extra])[:num_classes]
    return colors / np.abs(colors).max(axis=1, keepdims=True)


def make_toy_dataset(spec: ToySpec, seed: int, name: str = "toy") -> LabeledDataset:
    """Render class-conditional stripe/blob images.

    A class is defined by its stripe frequency (plus, when ``texture > 0``, a
    class-coloured checkerboard).  Stripe orientation and phase, a distractor
    blob, a colour cast, global brightness and pixel noise are nuisances
    shared by every class.  ``margin`` scales both class cues, so ``margin == 0``
    yields identically distributed classes (flagged in ``metadata["warnings"]``).
    """
    if spec.image_size < 8:
        raise DatasetError("image_size must be at least 8")
    if spec.num_classes < 2:
        raise DatasetError("num_classes must be at least 2")
    if spec.samples_per_class < 1:
        raise DatasetError("empty dataset: samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    k, n, s = spec.num_classes, spec.samples_per_class, spec.image_size
    labels = np.repeat(np.arange(k), n)
    total = len(labels)

    yy, xx = np.meshgrid(np.linspace(-1, 1, s), np.linspace(-1, 1, s), indexing="ij")
    freqs = 1.0 + 2.0 * np.arange(k) / max(k - 1, 1)

    theta = rng.uniform(0, np.pi, total)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, total)[:, None, None]
    proj = xx[None] * np.cos(theta) + yy[None] * np.sin(theta)
    stripes = np.sin(np.pi * freqs[labels][:, None, None] * proj + phase)

    cx, cy = rng.uniform(-0.7, 0.7, (2, total))
    width = rng.uniform(0.2, 0.45, total)
    blob = np.exp(-((xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2)
                  / (2 * width[:, None, None] ** 2))
    blob_color = rng.uniform(-0.3, 0.3, (total, 3))

    img = np.full((total, s, s, 3), 0.5)
    img += spec.margin * TOY_STRIPE * stripes[..., None]
    img += blob[..., None] * blob_color[:, None, None, :]
    img += rng.uniform(-TOY_CAST, TOY_CAST, (total, 1, 1, 3))
    if spec.texture:
        checker = (-1.0) ** (np.arange(s)[:, None] + np.arange(s)[None, :])
        colors = _texture_colors(k)[labels][:, None, None, :]
        img += spec.margin * spec.texture * checker[None, :, :, None] * colors
    img += rng.uniform(-0.08, 0.08, (total, 1, 1, 1))
    img += rng.normal(0, 0.03, img.shape)
    images = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)

    order = rng.permutation(total)
    metadata = {"toy_spec": spec.__dict__.copy(), "seed": seed, "warnings": []}
    if spec.margin <= 0:
        metadata["warnings"].append("margin <= 0: class-conditional distributions are identical")
    return LabeledDataset(images=images[order], labels=labels[order], num_classes=k,
                          name=name, metadata=metadata)


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------

def balanced_split(ds: LabeledDataset, val_total: int, seed: int) -> tuple:
    """Hold out ``val_total / num_classes`` samples of every class."""
    if val_total < 0 or val_total % ds.num_classes:
        raise DatasetError(
            f"val_total={val_total} is not divisible by num_classes={ds.num_classes}"
        )
    per_class = val_total // ds.num_classes
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < per_class:
            raise DatasetError(
                f"class {c} has {len(members)} samples, fewer than the {per_class} requested"
            )
        val_idx.append(rng.permutation(members)[:per_class])
    val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.zeros(0, np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[val_idx] = False
    return (ds.subset(np.flatnonzero(mask), name=f"{ds.name}-train"),
            ds.subset(val_idx, name=f"{ds.name}-val"))


def batch_order(n: int, shuffle_seed: Optional[int]) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(shuffle_seed).permutation(n)


def batch_iter(ds: LabeledDataset, batch_size: int = 256,
               shuffle_seed: Optional[int] = None) -> Iterator[ImageBatch]:
    if batch_size < 1:
        raise DatasetError("batch_size must be at least 1")
    order = batch_order(len(ds), shuffle_seed)
    for start in range(0, len(order), batch_size):
        yield ds.to_batch(order[start:start + batch_size])


def write_metadata(ds: LabeledDataset, path) -> None:
    record = {
        "name": ds.name,
        "num_classes": ds.num_classes,
        "num_samples": len(ds),
        "image_shape": list(ds.image_shape),
        "class_counts": ds.class_counts(),
        "metadata": ds.metadata,
    }
    Path(path).write_text(json.dumps(record, indent=2, default=str))


def data_root() -> Optional[Path]:
    root = os.environ.get("PROFEAT_DATA")
    return Path(root) if root else None
