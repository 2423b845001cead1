# test_data.py
# LeaSE Engine - Dataset Tests
# Created by Digital COE Gen AI Team

import struct

import numpy as np
import pytest
from sklearn.neighbors import NearestCentroid

from leasenas.exceptions import (
    DataError, EmptySplitError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError
)
from leasenas.models.schemas import DataConfig
from leasenas.services.data import (
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, BatchIterator, LabeledSet, bar_prototypes, batch_iterator,
    generate_synthetic, load_idx, load_splits, partition, split_four, union
)


def write_idx(tmp_path, images, labels, image_magic=IDX_IMAGES_MAGIC, label_count=None, drop=0):
    n, h, w = images.shape
    image_bytes = struct.pack(">IIII", image_magic, n, h, w) + images.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", IDX_LABELS_MAGIC, n if label_count is None else label_count)
    label_bytes += labels.astype(np.uint8).tobytes()
    images_path, labels_path = tmp_path / "images.idx", tmp_path / "labels.idx"
    images_path.write_bytes(image_bytes[:len(image_bytes) - drop])
    labels_path.write_bytes(label_bytes)
    return images_path, labels_path


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(40, 4, 4))
    labels = np.arange(40) % 4
    return write_idx(tmp_path, images, labels), images, labels


class TestSynthetic:
    def test_noise_free_images_are_prototypes(self):
        splits = generate_synthetic(DataConfig(noise=0.0, n_per_split=8, test_size=8), seed=0)
        protos = bar_prototypes(8)
        for image, label in zip(splits.e_train.images, splits.e_train.labels):
            np.testing.assert_array_equal(image[0], protos[label])

    def test_classes_balanced_and_values_in_range(self):
        splits = generate_synthetic(DataConfig(n_per_split=16), seed=1)
        assert np.bincount(splits.e_val.labels).tolist() == [4, 4, 4, 4]
        assert splits.test.images.min() >= 0.0 and splits.test.images.max() <= 1.0
        assert splits.e_train.images.shape == (16, 1, 8, 8)

    def test_deterministic_per_seed(self):
        config = DataConfig(n_per_split=8, test_size=8)
        a, b = generate_synthetic(config, 3), generate_synthetic(config, 3)
        assert a.test.images.tobytes() == b.test.images.tobytes()
        assert not np.array_equal(a.test.images, generate_synthetic(config, 4).test.images)

    def test_shared_splits_alias(self):
        shared = generate_synthetic(DataConfig(n_per_split=8, test_size=8), 0)
        assert shared.aliased and shared.training_union() is shared.e_train
        separate = generate_synthetic(DataConfig(n_per_split=8, test_size=8, shared_splits=False), 0)
        assert not separate.aliased
        assert len(separate.training_union()) == 16

    def test_nearest_centroid_separates_classes(self):
        splits = generate_synthetic(DataConfig(n_per_split=64, test_size=256), seed=0)
        train = splits.training_union()
        model = NearestCentroid().fit(train.images.reshape(len(train), -1), train.labels)
        score = model.score(splits.test.images.reshape(len(splits.test), -1), splits.test.labels)
        assert score >= 0.95


class TestIdx:
    def test_round_trip_scales_pixels(self, idx_pair):
        (images_path, labels_path), images, labels = idx_pair
        ds = load_idx(images_path, labels_path)
        assert ds.images.shape == (40, 1, 4, 4)
        np.testing.assert_allclose(ds.images[:, 0], images / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_bad_magic(self, tmp_path):
        paths = write_idx(tmp_path, np.zeros((2, 3, 3)), np.zeros(2), image_magic=0x00000801)
        with pytest.raises(IdxMagicError):
            load_idx(*paths)

    def test_truncated_body(self, tmp_path):
        paths = write_idx(tmp_path, np.zeros((2, 3, 3)), np.zeros(2), drop=5)
        with pytest.raises(IdxTruncatedError):
            load_idx(*paths)

    def test_count_mismatch(self, tmp_path):
        paths = write_idx(tmp_path, np.zeros((2, 3, 3)), np.zeros(3), label_count=3)
        with pytest.raises(IdxCountMismatchError):
            load_idx(*paths)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_idx(tmp_path / "nope", tmp_path / "nope")

    def test_load_splits_from_idx(self, idx_pair):
        (images_path, labels_path), _, _ = idx_pair
        config = DataConfig(source="idx", idx_images=images_path, idx_labels=labels_path,
                            test_fraction=0.25, shared_splits=False)
        splits = load_splits(config, seed=0)
        assert len(splits.test) == 10
        assert sum(len(getattr(splits, name)) for name in ("e_train", "a_train", "e_val", "a_val")) == 30

    def test_labels_beyond_num_classes_rejected(self, tmp_path):
        digits = np.arange(20) % 10
        paths = write_idx(tmp_path, np.zeros((20, 4, 4)), digits)
        config = DataConfig(source="idx", idx_images=paths[0], idx_labels=paths[1])
        with pytest.raises(DataError, match="data.num_classes") as info:
            load_splits(config, seed=0)
        assert info.value.exit_code == 1
        splits = load_splits(config.model_copy(update={"num_classes": 10}), seed=0)
        assert len(splits.test) == 4


class TestSplitting:
    @pytest.fixture
    def ds(self):
        return LabeledSet(images=np.arange(10.0).reshape(10, 1, 1, 1), labels=np.arange(10))

    def test_sizes_floor_with_remainder_last(self, ds):
        parts = partition(ds, [0.25, 0.25, 0.25, 0.25], seed=0)
        assert [len(p) for p in parts] == [2, 2, 2, 4]

    def test_parts_are_disjoint_and_cover(self, ds):
        splits = split_four(ds, [0.1, 0.2, 0.3, 0.4], seed=5)
        combined = union([splits.e_train, splits.a_train, splits.e_val, splits.a_val])
        assert sorted(combined.labels.tolist()) == list(range(10))

    def test_empty_part(self, ds):
        with pytest.raises(EmptySplitError):
            partition(ds, [0.05, 0.95], seed=0)

    def test_fractions_must_sum_to_one(self, ds):
        with pytest.raises(DataError):
            partition(ds, [0.5, 0.4], seed=0)


class TestBatching:
    def test_each_epoch_covers_the_set_once(self):
        ds = LabeledSet(images=np.zeros((10, 1, 2, 2)), labels=np.arange(10))
        iterator = BatchIterator(ds, batch_size=4, seed=0)
        batches = list(iterator.epoch_batches())
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate([b.labels for b in batches]).tolist()) == list(range(10))

    def test_endless_and_reproducible(self):
        ds = LabeledSet(images=np.zeros((3, 1, 2, 2)), labels=np.arange(3))
        first = [b.labels.tolist() for _, b in zip(range(5), batch_iterator(ds, 2, seed=1))]
        second = [b.labels.tolist() for _, b in zip(range(5), batch_iterator(ds, 2, seed=1))]
        assert first == second and len(first) == 5

    def test_empty_set_rejected(self):
        with pytest.raises(EmptySplitError):
            BatchIterator(LabeledSet(images=np.zeros((0, 1, 2, 2)), labels=np.zeros(0)), 2, seed=0)
