"""
Datasets
CIFAR-10 binary ingestion, synthetic shape glyphs, batching
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from src.config import DATA_DIR
from src.errors import ConfigError, DataError
from src.utils.io import atomic_write
from src.utils.seeds import derive_seed

logger = logging.getLogger(__name__)

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
CIFAR_RECORD = 1 + CIFAR_PIXELS
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

GLYPHS = ['square', 'circle', 'triangle', 'cross', 'ring', 'bar']


@dataclass
class Dataset:
    """Images N x C x H x W in [0, 1] with integer labels"""
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = 'train'
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"Images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"Labels outside [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("Pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]


def subset(dataset: Dataset, indices: Sequence[int], split: Optional[str] = None) -> Dataset:
    """Dataset restricted to indices, in the given order"""
    idx = np.asarray(indices, dtype=np.int64)
    provenance = dict(dataset.provenance, subset=len(idx))
    return Dataset(dataset.images[idx], dataset.labels[idx], dataset.class_count,
                   split or dataset.split, provenance)


def take(dataset: Dataset, n: int) -> Dataset:
    """First n samples"""
    return subset(dataset, range(min(n, len(dataset))))


def batch_indices(n: int, size: int, seed: int = 0, shuffle: bool = False) -> List[np.ndarray]:
    """Index arrays of consecutive batches over n samples; the final partial batch is kept"""
    if size < 1:
        raise ConfigError(f"Batch size must be >= 1, got {size}")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [order[start:start + size] for start in range(0, n, size)]


def batches(dataset: Dataset, size: int, seed: int = 0,
            shuffle: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Consecutive (images, labels) batches

    With shuffle, the order is a permutation drawn from seed.
    """
    for idx in batch_indices(len(dataset), size, seed, shuffle):
        yield dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def parse_cifar10_records(raw: bytes, source: str = '<bytes>') -> Tuple[np.ndarray, np.ndarray]:
    """Decode label byte + 3072 plane-major pixel bytes per record"""
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{source}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if len(bad):
        offset = int(bad[0]) * CIFAR_RECORD
        raise DataError(f"{source}: label byte {labels[bad[0]]} > 9 at offset {offset}")
    images = records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return images, labels


def read_cifar10_file(path: str, expected_records: Optional[int] = CIFAR_RECORDS_PER_FILE) -> Tuple[np.ndarray, np.ndarray]:
    """Read one batch file; expected_records=None accepts any whole record count"""
    if not os.path.exists(path):
        raise DataError(f"CIFAR-10 file not found: {path}")
    with open(path, 'rb') as fh:
        raw = fh.read()
    if expected_records is not None:
        expected = expected_records * CIFAR_RECORD
        if len(raw) != expected:
            raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return parse_cifar10_records(raw, path)


def load_cifar10_binary(directory: str) -> Tuple[Dataset, Dataset]:
    """Five training batch files plus the test batch file"""
    if not os.path.isdir(directory):
        raise ConfigError(f"CIFAR-10 directory does not exist: {directory}")
    train_images, train_labels = [], []
    for name in CIFAR_TRAIN_FILES:
        images, labels = read_cifar10_file(os.path.join(directory, name))
        train_images.append(images)
        train_labels.append(labels)
    test_images, test_labels = read_cifar10_file(os.path.join(directory, CIFAR_TEST_FILE))
    provenance = {'source': 'cifar10', 'path': os.path.abspath(directory)}
    train = Dataset(np.concatenate(train_images), np.concatenate(train_labels), CIFAR_CLASSES, 'train', provenance)
    test = Dataset(test_images, test_labels, CIFAR_CLASSES, 'test', provenance)
    logger.info(f"Loaded CIFAR-10: {len(train)} train, {len(test)} test")
    return train, test


def save_cifar10_binary(dataset: Dataset, path: str):
    """Write a dataset in the CIFAR-10 record layout (pixels quantized to bytes)"""
    if dataset.image_shape != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f"CIFAR-10 layout needs 3 x 32 x 32 images, got {dataset.image_shape}")
    if dataset.class_count > CIFAR_CLASSES:
        raise DataError(f"CIFAR-10 layout holds at most {CIFAR_CLASSES} classes")
    pixels = np.rint(dataset.images.reshape(len(dataset), -1) * 255.0).astype(np.uint8)
    records = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = pixels
    with atomic_write(path, 'wb') as fh:
        fh.write(records.tobytes())


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

def glyph_mask(kind: str, side: int, center: Tuple[float, float], half: float) -> np.ndarray:
    """Boolean side x side mask of a glyph centered at (row, col) with half-size `half`"""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy = yy - center[0]
    dx = xx - center[1]
    r = np.sqrt(dy * dy + dx * dx)
    if kind == 'square':
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == 'circle':
        return r <= half
    if kind == 'triangle':
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    if kind == 'cross':
        arm = half / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= half))
    if kind == 'ring':
        return (r <= half) & (r >= 0.55 * half)
    if kind == 'bar':
        return (np.abs(dy) <= half / 4.0) & (np.abs(dx) <= half)
    raise ConfigError(f"Unknown glyph '{kind}'")


def gen_synthetic_shapes(n_per_class: int, class_count: int = 4, image_side: int = 32,
                         noise_sd: float = 0.05, seed: int = 0, channels: int = 3,
                         randomize: bool = True, split: str = 'train') -> Dataset:
    """
    Geometric glyph classification set, fully determined by seed

    Samples are interleaved by class (label = index mod class_count). With
    randomize=False every glyph is centered with half-size side/4 at intensity 1.
    """
    if class_count > len(GLYPHS):
        raise ConfigError(f"At most {len(GLYPHS)} glyph classes, got {class_count}")
    if class_count < 2:
        raise ConfigError(f"Need at least 2 classes, got {class_count}")
    if image_side < 16:
        raise ConfigError(f"image_side must be >= 16, got {image_side}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise_sd < 0:
        raise ConfigError(f"noise_sd must be >= 0, got {noise_sd}")

    rng = np.random.default_rng(seed)
    n = n_per_class * class_count
    images = np.zeros((n, channels, image_side, image_side))
    labels = np.arange(n) % class_count
    for i, label in enumerate(labels):
        if randomize:
            half = rng.uniform(0.18, 0.3) * image_side
            center = (rng.uniform(half, image_side - 1 - half), rng.uniform(half, image_side - 1 - half))
            intensity = rng.uniform(0.6, 1.0)
            tint = rng.uniform(0.7, 1.0, size=channels)
        else:
            half = image_side / 4.0
            center = ((image_side - 1) / 2.0, (image_side - 1) / 2.0)
            intensity = 1.0
            tint = np.ones(channels)
        mask = glyph_mask(GLYPHS[label], image_side, center, half)
        images[i] = (intensity * tint)[:, None, None] * mask[None, :, :]
    if noise_sd > 0:
        images = images + rng.normal(0.0, noise_sd, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    provenance = {'source': 'synthetic', 'seed': seed, 'noise_sd': noise_sd, 'n_per_class': n_per_class}
    return Dataset(images, labels, class_count, split, provenance)


class DatasetSpec(BaseModel):
    """[dataset] section of a run configuration"""
    model_config = ConfigDict(extra='forbid')

    kind: Literal['synthetic', 'cifar10'] = 'synthetic'
    path: Optional[str] = None
    class_count: int = 4
    n_per_class: int = 500
    test_per_class: int = 100
    image_side: int = 32
    noise_sd: float = 0.05
    limit_train: Optional[int] = None
    limit_test: Optional[int] = None

    @field_validator('class_count', 'n_per_class', 'test_per_class', 'image_side')
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value


def resolve_data_path(path: str) -> str:
    """Relative paths that do not exist here are looked up under XAIGUARD_DATA_DIR"""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(DATA_DIR, path)
    return candidate if os.path.exists(candidate) else path


def load_dataset(spec: DatasetSpec, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """(train, test) pair for a dataset section"""
    if spec.kind == 'cifar10':
        if not spec.path:
            raise ConfigError("dataset.path is required for cifar10")
        train, test = load_cifar10_binary(resolve_data_path(spec.path))
    else:
        train = gen_synthetic_shapes(spec.n_per_class, spec.class_count, spec.image_side, spec.noise_sd,
                                     derive_seed(seed, 'data/train'), split='train')
        test = gen_synthetic_shapes(spec.test_per_class, spec.class_count, spec.image_side, spec.noise_sd,
                                    derive_seed(seed, 'data/test'), split='test')
    if spec.limit_train is not None:
        train = take(train, spec.limit_train)
    if spec.limit_test is not None:
        test = take(test, spec.limit_test)
    return train, test
