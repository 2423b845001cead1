# data.py
# LeaSE Engine - Dataset Synthesis, IDX Loading & Splitting
# Created by Digital COE Gen AI Team

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from leasenas.exceptions import (
    DataError, EmptySplitError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError
)
from leasenas.models.schemas import DataConfig, DataSource


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLIT_NAMES = ("e_train", "a_train", "e_val", "a_val")

# independent random streams per data concern
SYNTHETIC_STREAM = 10
SPLIT_STREAM = 11
BATCH_STREAM = 12


@dataclass(frozen=True)
class LabeledSet:
    """Images N x 1 x H x W in [0, 1] with class labels in [0, K)."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, indices) -> "LabeledSet":
        indices = np.asarray(indices, dtype=int)
        return LabeledSet(images=self.images[indices], labels=self.labels[indices])


@dataclass(frozen=True)
class DatasetSplits:
    """The four roles of the search phase plus the held-out test set."""
    e_train: LabeledSet
    a_train: LabeledSet
    e_val: LabeledSet
    a_val: LabeledSet
    test: Optional[LabeledSet] = None

    @property
    def aliased(self) -> bool:
        return self.e_train is self.a_train and self.e_val is self.a_val

    def training_union(self) -> LabeledSet:
        """Every distinct training example, for the evaluation retrain."""
        if self.aliased:
            return self.e_train
        return union([self.e_train, self.a_train])


def union(sets: Sequence[LabeledSet]) -> LabeledSet:
    """Concatenate labeled sets in order."""
    if not sets:
        raise EmptySplitError("union of no sets")
    return LabeledSet(
        images=np.concatenate([s.images for s in sets], axis=0),
        labels=np.concatenate([s.labels for s in sets], axis=0),
    )


# Synthetic bars

def bar_prototypes(size: int) -> np.ndarray:
    """Horizontal, vertical, diagonal and anti-diagonal bars through the image centre, 4 x size x size."""
    protos = np.zeros((4, size, size))
    mid = size // 2
    protos[0, mid, :] = 1.0
    protos[1, :, mid] = 1.0
    protos[2] = np.eye(size)
    protos[3] = np.fliplr(np.eye(size))
    return protos


def _draw_bars(count: int, size: int, num_classes: int, noise: float, rng: np.random.Generator) -> LabeledSet:
    labels = np.arange(count) % num_classes
    rng.shuffle(labels)
    protos = bar_prototypes(size)[:num_classes]
    images = protos[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)[:, None, :, :]
    return LabeledSet(images=images, labels=labels.astype(np.int64))


def generate_synthetic(config: DataConfig, seed: int) -> DatasetSplits:
    """
    Oriented-bar classification task with balanced classes.

    Args:
        config: image_size, num_classes, n_per_split, noise, test_size, shared_splits
        seed: Run seed

    Returns:
        DatasetSplits; with shared_splits the explainer/audience pairs alias the same sets
    """
    if config.num_classes > 4:
        raise DataError("synthetic bars support at most 4 classes")
    if config.n_per_split < config.num_classes:
        raise DataError(f"n_per_split {config.n_per_split} is below num_classes {config.num_classes}")
    rng = np.random.default_rng([seed, SYNTHETIC_STREAM])

    def draw(count):
        return _draw_bars(count, config.image_size, config.num_classes, config.noise, rng)

    if config.shared_splits:
        train, val = draw(config.n_per_split), draw(config.n_per_split)
        splits = DatasetSplits(train, train, val, val, test=draw(config.test_size))
    else:
        parts = [draw(config.n_per_split) for _ in SPLIT_NAMES]
        splits = DatasetSplits(*parts, test=draw(config.test_size))
    logger.debug(
        f"Synthetic bars: {config.num_classes} classes, {config.n_per_split}/split, "
        f"test={config.test_size}, shared={config.shared_splits}"
    )
    return splits


# IDX files

def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"IDX file not found: {path}") from None
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) < expected:
        raise IdxTruncatedError(f"{path}: {len(body)} data bytes, header promises {expected}")
    return np.frombuffer(body[:expected], dtype=np.uint8).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> LabeledSet:
    """
    Read an IDX image/label file pair.

    Returns:
        LabeledSet with pixels scaled from bytes to [0, 1] and a channel axis added
    """
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    logger.info(f"Loaded {images.shape[0]} IDX images of {images.shape[1]}x{images.shape[2]} from {images_path}")
    return LabeledSet(
        images=(images.astype(np.float64) / 255.0)[:, None, :, :],
        labels=labels.astype(np.int64),
    )


# Splitting

def partition(ds: LabeledSet, fractions: Sequence[float], seed: int) -> List[LabeledSet]:
    """
    Seeded shuffle, then contiguous parts sized floor(fraction * N); the remainder goes to the last part.

    Raises:
        EmptySplitError: a part would be empty
    """
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1 (got {sum(fractions)})")
    n = len(ds)
    order = np.random.default_rng([seed, SPLIT_STREAM]).permutation(n)
    sizes = [int(np.floor(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    parts, offset = [], 0
    for position, size in enumerate(sizes):
        if size <= 0:
            raise EmptySplitError(f"split {position} is empty ({fractions[position]} of {n} examples)")
        parts.append(ds.take(order[offset:offset + size]))
        offset += size
    return parts


def split_four(ds: LabeledSet, fractions: Sequence[float], seed: int) -> DatasetSplits:
    if len(fractions) != 4:
        raise DataError(f"split_four needs 4 fractions, got {len(fractions)}")
    return DatasetSplits(*partition(ds, fractions, seed))


def load_splits(config: DataConfig, seed: int) -> DatasetSplits:
    """Build the run's splits from the [data] section."""
    if config.source == DataSource.SYNTHETIC:
        return generate_synthetic(config, seed)

    full = load_idx(config.idx_images, config.idx_labels)
    top = int(full.labels.max()) if len(full) else -1
    if top >= config.num_classes:
        raise DataError(
            f"data.num_classes: IDX labels reach {top} but num_classes is {config.num_classes}"
        )
    rest, test = partition(full, [1.0 - config.test_fraction, config.test_fraction], seed)
    if config.shared_splits:
        # pairs share data: fold the four fractions into train/val halves
        train_fraction = config.fractions[0] + config.fractions[1]
        train, val = partition(rest, [train_fraction, 1.0 - train_fraction], seed + 1)
        logger.warning("Explainer and audience splits are aliased (shared_splits = true)")
        return DatasetSplits(train, train, val, val, test=test)
    splits = split_four(rest, config.fractions, seed)
    return DatasetSplits(splits.e_train, splits.a_train, splits.e_val, splits.a_val, test=test)


# Batching

class BatchIterator:
    """Endless batches; each epoch is a fresh seeded permutation and keeps its short final batch."""

    def __init__(self, ds: LabeledSet, batch_size: int, seed: int, stream: int = 0):
        if batch_size < 1:
            raise DataError("batch size must be >= 1")
        if len(ds) == 0:
            raise EmptySplitError("cannot batch an empty set")
        self.ds = ds
        self.batch_size = batch_size
        self._rng = np.random.default_rng([seed, BATCH_STREAM, stream])
        self.epoch = 0

    def epoch_batches(self) -> Iterator[LabeledSet]:
        order = self._rng.permutation(len(self.ds))
        self.epoch += 1
        for start in range(0, len(order), self.batch_size):
            yield self.ds.take(order[start:start + self.batch_size])

    def __iter__(self) -> Iterator[LabeledSet]:
        while True:
            yield from self.epoch_batches()


def batch_iterator(ds: LabeledSet, batch_size: int, seed: int, stream: int = 0) -> Iterator[LabeledSet]:
    return iter(BatchIterator(ds, batch_size, seed, stream))
