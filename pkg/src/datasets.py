"""
Dataset ingestion: IDX files (MNIST layout) and seeded synthetic tasks.
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from src.errors import ConfigError, IdxFormatError, ShapeError

logger = logging.getLogger(__name__)

# IDX dtype codes; only unsigned bytes are supported
IDX_UBYTE = 0x08
SPLITS = {'train': 0, 'test': 1}
BUMPS_PER_TEMPLATE = 3


@dataclass(frozen=True)
class Dataset:
    """images: N x C x H x W float64, labels: N int64."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError("dataset", "image rank", 4, self.images.ndim)
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("dataset", "labels", (self.images.shape[0],), self.labels.shape)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def read_idx_raw(path) -> np.ndarray:
    """Decode an IDX file into a uint8 array of its declared shape."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IdxFormatError(path, f"cannot read file: {e}") from e

    if len(data) < 4:
        raise IdxFormatError(path, "truncated header", 4, len(data))
    zero0, zero1, dtype_code, ndim = struct.unpack(">BBBB", data[:4])
    if zero0 != 0 or zero1 != 0:
        raise IdxFormatError(path, "bad magic", "0x0000xxxx", f"0x{data[:4].hex()}")
    if dtype_code != IDX_UBYTE:
        raise IdxFormatError(path, "unsupported dtype code", f"0x{IDX_UBYTE:02x}", f"0x{dtype_code:02x}")
    if ndim == 0:
        raise IdxFormatError(path, "bad magic: zero dimensions", ">= 1", 0)

    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(path, "truncated header", f"{header} bytes", f"{len(data)} bytes")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + math.prod(dims)
    if len(data) < expected:
        raise IdxFormatError(path, "truncated payload", f"{expected} bytes", f"{len(data)} bytes")
    if len(data) > expected:
        raise IdxFormatError(path, "trailing bytes after payload", f"{expected} bytes", f"{len(data)} bytes")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx(path) -> np.ndarray:
    """
    One-dimensional files are labels (int64); anything else is images,
    promoted to float64 in [0, 1].
    """
    raw = read_idx_raw(path)
    if raw.ndim == 1:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxFormatError(path, "only uint8 arrays can be written", "uint8", array.dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">BBBB", 0, 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + np.ascontiguousarray(array).tobytes())


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 and round."""
    low, high = float(images.min()), float(images.max())
    if high == low:
        return np.zeros(images.shape, dtype=np.uint8)
    return np.rint((images - low) / (high - low) * 255.0).astype(np.uint8)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise IdxFormatError(images_path, "images must have 3 or 4 dimensions", "3 or 4", images.ndim)
    if labels.ndim != 1:
        raise IdxFormatError(labels_path, "labels must have 1 dimension", 1, labels.ndim)
    if labels.shape[0] != images.shape[0]:
        raise IdxFormatError(labels_path, "label count does not match image count",
                             images.shape[0], labels.shape[0])
    logger.info("[Data] loaded %d images of shape %s from %s", len(labels), images.shape[1:], images_path)
    return Dataset(images, labels, int(labels.max()) + 1 if labels.size else 0)


def _class_templates(task_seed: int, classes: int, image_shape: Tuple[int, int, int]) -> np.ndarray:
    """Per class and channel, a sum of Gaussian bumps with seeded centers, widths and amplitudes."""
    rng = np.random.default_rng(np.random.SeedSequence(task_seed, spawn_key=(0,)))
    channels, height, width = image_shape
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    scale = max(height, width)
    templates = np.zeros((classes, channels, height, width))
    for k in range(classes):
        for c in range(channels):
            for _ in range(BUMPS_PER_TEMPLATE):
                cy = rng.uniform(0, height - 1)
                cx = rng.uniform(0, width - 1)
                width_px = rng.uniform(0.1, 0.25) * scale
                amplitude = rng.uniform(0.5, 1.5) * rng.choice((-1.0, 1.0))
                templates[k, c] += amplitude * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * width_px ** 2))
    return templates


def gen_synthetic_task(task_seed: int, classes: int, samples_per_class: int,
                       image_shape: Tuple[int, int, int], noise: float, split: str = 'train') -> Dataset:
    """
    Class k is its template plus iid Gaussian noise. Templates depend only
    on task_seed; the noise stream also depends on the split.
    """
    if classes < 2:
        raise ConfigError(f"a synthetic task needs at least 2 classes, got {classes}")
    if samples_per_class < 1:
        raise ConfigError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {sorted(SPLITS)}, got '{split}'")
    image_shape = tuple(int(d) for d in image_shape)

    templates = _class_templates(task_seed, classes, image_shape)
    noise_rng = np.random.default_rng(np.random.SeedSequence(task_seed, spawn_key=(1 + SPLITS[split],)))
    images = np.repeat(templates, samples_per_class, axis=0)
    if noise > 0:
        images = images + noise * noise_rng.standard_normal(images.shape)
    labels = np.repeat(np.arange(classes, dtype=np.int64), samples_per_class)
    return Dataset(images, labels, classes)


def load_dataset(dataset_config, split: str) -> Dataset:
    """Build the train or test split a DatasetConfig describes."""
    if dataset_config.source == 'synthetic':
        per_class = (dataset_config.samples_per_class if split == 'train'
                     else dataset_config.test_samples_per_class)
        return gen_synthetic_task(dataset_config.task_seed, dataset_config.classes, per_class,
                                  dataset_config.image_shape, dataset_config.noise, split)
    images = dataset_config.train_images if split == 'train' else dataset_config.test_images
    labels = dataset_config.train_labels if split == 'train' else dataset_config.test_labels
    if not images or not labels:
        raise ConfigError(f"IDX dataset needs {split} image and label paths")
    return load_idx_dataset(images, labels)
