import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass, asdict
from typing import Dict, Iterator, Tuple

import numpy as np

logger = logging.getLogger(__name__)

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX file cannot be parsed"""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """Images (N, H, W, C) float32 in [0, 1] and integer labels (N,)"""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Sample:
        return Sample(self.images[index], int(self.labels[index]))

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices])

    def of_classes(self, classes) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def batches(self, batch_size: int, rng: np.random.Generator = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    samples_per_class: int = 300
    image_size: int = 32
    noise_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be at least 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> Dict:
        return asdict(self)


def class_templates(num_classes: int, image_size: int) -> np.ndarray:
    """One oriented sinusoidal grating per class, values in [0, 1]"""
    coords = np.arange(image_size, dtype=np.float64) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    templates = np.empty((num_classes, image_size, image_size), dtype=np.float64)
    for k in range(num_classes):
        angle = math.pi * k / num_classes
        frequency = 2 + (k % 3)
        phase = xx * math.cos(angle) + yy * math.sin(angle)
        templates[k] = 0.5 + 0.5 * np.sin(2 * math.pi * frequency * phase)
    return templates


def generate_synthetic(spec: SyntheticSpec) -> DatasetSplits:
    """Templates plus Gaussian pixel noise, split 70/10/20 per class"""
    rng = np.random.default_rng(spec.seed)
    templates = class_templates(spec.num_classes, spec.image_size)
    n = spec.samples_per_class
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for k in range(spec.num_classes):
        noise = rng.normal(0.0, spec.noise_std, size=(n, spec.image_size, spec.image_size))
        images = np.clip(templates[k][None] + noise, 0.0, 1.0).astype(np.float32)
        order = rng.permutation(n)
        cuts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
                "test": order[n_train + n_val:]}
        for split, idx in cuts.items():
            parts[split][0].append(images[idx])
            parts[split][1].append(np.full(len(idx), k, dtype=np.int64))
    datasets = {split: Dataset(np.concatenate(imgs)[..., None], np.concatenate(labels))
                for split, (imgs, labels) in parts.items()}
    logger.info(f"Generated synthetic data: K={spec.num_classes}, "
                f"{len(datasets['train'])}/{len(datasets['val'])}/{len(datasets['test'])} train/val/test")
    return DatasetSplits(**datasets)


def nearest_template_accuracy(dataset: Dataset, num_classes: int) -> float:
    """Accuracy of assigning each image to the closest class template"""
    templates = class_templates(num_classes, dataset.images.shape[1]).reshape(num_classes, -1)
    flat = dataset.images[..., 0].reshape(len(dataset), -1).astype(np.float64)
    distances = ((flat[:, None, :] - templates[None]) ** 2).sum(axis=2)
    return float((distances.argmin(axis=1) == dataset.labels).mean())


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def _open(path: str, mode: str):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _read_idx(path: str, expected_magic) -> np.ndarray:
    with _open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX magic number")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic not in expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected one of "
                            f"{', '.join(f'0x{m:08x}' for m in expected_magic)}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    count = int(np.prod(dims))
    if len(blob) - header_end < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(blob) - header_end}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label pair; bytes are scaled to [0, 1]"""
    try:
        images = _read_idx(images_path, (IMAGE_MAGIC, IMAGE_MAGIC + 1))
        labels = _read_idx(labels_path, (LABEL_MAGIC,))
        if images.shape[0] != labels.shape[0]:
            raise IdxCountMismatchError(
                f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels")
        dataset = Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64))
        logger.info(f"Loaded {len(dataset)} IDX samples from {images_path}")
        return dataset
    except IdxFormatError as e:
        logger.error(f"IDX parse failed: {e}")
        raise


def export_idx(dataset: Dataset, images_path: str, labels_path: str):
    """Write 8-bit IDX files; pixels are quantized to the nearest 1/255"""
    images = dataset.images
    if images.shape[-1] == 1:
        images = images[..., 0]
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    for path in (images_path, labels_path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">I", (IDX_UBYTE << 8) | pixels.ndim))
        f.write(struct.pack(f">{pixels.ndim}I", *pixels.shape))
        f.write(pixels.tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())
    logger.info(f"Exported {len(dataset)} samples to {images_path}")
