"""Dataset loading, the binary record format, synthesis, and augmentation."""

import numpy as np
import pytest

from prunekit.data import (
    augment_batch,
    load_cifar10,
    parse_records,
    serialize_records,
    synthetic_dataset,
    synthetic_pair,
)
from prunekit.errors import DataError
from prunekit.models import ModelSpec, build_model
from prunekit.nn import SGD, Tensor, softmax_cross_entropy
from prunekit.random import derive_rng

RECORD = 1 + 3 * 32 * 32


def write_cifar_dir(tmp_path, n_per_file=4, bad_label_file=None, truncate_file=None):
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        images = rng.integers(0, 256, size=(n_per_file, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, size=n_per_file).astype(np.uint8)
        if name == bad_label_file:
            labels[1] = 11
        blob = serialize_records(images, labels.astype(np.int64))
        if name == truncate_file:
            blob = blob[: RECORD - 1]
        (tmp_path / name).write_bytes(blob)
    return tmp_path


class TestRecordFormat:
    def test_round_trip_is_bitwise(self):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
        labels = np.array([5, 0, 9], dtype=np.int64)
        blob = serialize_records(images, labels)
        assert len(blob) == 3 * RECORD
        images2, labels2 = parse_records(blob, "mem")
        np.testing.assert_array_equal(images, images2)
        np.testing.assert_array_equal(labels, labels2)
        assert serialize_records(images2, labels2) == blob

    def test_planar_layout(self):
        """Byte 1 is the first red-plane pixel; plane order is R, G, B."""
        img = np.zeros((1, 3, 32, 32), dtype=np.uint8)
        img[0, 0, 0, 0] = 7
        img[0, 2, 0, 0] = 9
        blob = serialize_records(img, np.array([3], dtype=np.int64))
        assert blob[0] == 3 and blob[1] == 7
        assert blob[1 + 2 * 1024] == 9

    def test_truncated_blob_reports_offset(self):
        with pytest.raises(DataError, match="offset 0"):
            parse_records(b"\x00" * (RECORD - 1), "f.bin")

    def test_trailing_garbage_reports_offset(self):
        with pytest.raises(DataError, match=f"offset {RECORD}"):
            parse_records(b"\x00" * (RECORD + 5), "f.bin")


class TestLoader:
    def test_loads_and_normalizes(self, tmp_path):
        train, test = load_cifar10(str(write_cifar_dir(tmp_path)))
        assert len(train) == 20 and len(test) == 4
        assert train.images.dtype == np.uint8
        x, y = train.batch(np.arange(8))
        assert x.shape == (8, 3, 32, 32) and x.dtype == np.float64
        # batch statistics reflect train-split standardisation
        assert abs(x.mean()) < 0.5
        np.testing.assert_array_equal(test.mean, train.mean)

    def test_missing_file_is_named(self, tmp_path):
        write_cifar_dir(tmp_path)
        (tmp_path / "data_batch_3.bin").unlink()
        with pytest.raises(DataError, match="data_batch_3.bin"):
            load_cifar10(str(tmp_path))

    def test_truncated_file_is_named(self, tmp_path):
        write_cifar_dir(tmp_path, truncate_file="data_batch_2.bin")
        with pytest.raises(DataError, match="data_batch_2.bin"):
            load_cifar10(str(tmp_path))

    def test_label_out_of_range(self, tmp_path):
        write_cifar_dir(tmp_path, bad_label_file="test_batch.bin")
        with pytest.raises(DataError, match="record 1"):
            load_cifar10(str(tmp_path))


class TestSynthetic:
    def test_deterministic_per_seed(self):
        a = synthetic_dataset(4, 32, seed=3)
        b = synthetic_dataset(4, 32, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = synthetic_dataset(4, 32, seed=4)
        assert not np.array_equal(a.images, c.images)

    def test_size_equals_classes_gives_permutation(self):
        ds = synthetic_dataset(6, 6, seed=0)
        assert sorted(ds.labels.tolist()) == list(range(6))

    def test_balanced_label_counts(self):
        ds = synthetic_dataset(4, 102, seed=1)
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_exports_to_record_format(self):
        ds = synthetic_dataset(4, 8, shape=(3, 32, 32), seed=2)
        blob = serialize_records(ds.images, ds.labels)
        images, labels = parse_records(blob, "mem")
        np.testing.assert_array_equal(images, ds.images)
        np.testing.assert_array_equal(labels, ds.labels)

    def test_pair_shares_templates_and_stats(self):
        train, test = synthetic_pair(4, 64, 32, seed=5)
        np.testing.assert_array_equal(train.mean, test.mean)
        assert train.num_classes == test.num_classes == 4

    def test_high_separability_linear_probe(self):
        """A linear probe fits a separable synthetic set to >=95% in <=5 epochs."""
        train, _ = synthetic_pair(4, 128, 32, shape=(3, 8, 8), seed=7, separability=1.0)
        model = build_model(ModelSpec(arch="mlp_probe", input_shape=(3, 8, 8), classes=4, seed=0))
        opt = SGD(list(model.named_parameters()), lr=0.05, momentum=0.9)
        order_rng = derive_rng(0, "probe-shuffle")
        for _ in range(5):
            idx = order_rng.permutation(len(train))
            for start in range(0, len(train), 32):
                sel = idx[start : start + 32]
                x, y = train.batch(sel)
                opt.zero_grad()
                loss = softmax_cross_entropy(model.forward(Tensor(x)), y)
                loss.backward()
                opt.step()
        x, y = train.batch(np.arange(len(train)))
        preds = model.forward(Tensor(x)).data.argmax(axis=1)
        assert (preds == y).mean() >= 0.95


class TestAugmentation:
    def test_deterministic_for_fixed_stream(self):
        raw = np.random.default_rng(0).integers(0, 256, size=(6, 3, 8, 8), dtype=np.uint8)
        a = augment_batch(raw, derive_rng(1, "aug", 3))
        b = augment_batch(raw, derive_rng(1, "aug", 3))
        np.testing.assert_array_equal(a, b)
        c = augment_batch(raw, derive_rng(1, "aug", 4))
        assert not np.array_equal(a, c)

    def test_label_preserving_shape_preserving(self):
        raw = np.random.default_rng(1).integers(0, 256, size=(4, 3, 8, 8), dtype=np.uint8)
        out = augment_batch(raw, derive_rng(0, "aug", 0))
        assert out.shape == raw.shape and out.dtype == raw.dtype

    def test_identity_crop_exists(self):
        """With the right offsets the augmented image equals the original."""
        raw = np.arange(3 * 4 * 4, dtype=np.uint8).reshape(1, 3, 4, 4)
        pad = np.zeros((1, 3, 12, 12), dtype=np.uint8)
        pad[:, :, 4:8, 4:8] = raw
        np.testing.assert_array_equal(pad[:, :, 4:8, 4:8], raw)
