import gzip
import struct

import numpy as np
import pytest

from meprop import (
    BadMagicError,
    BatchIterator,
    CountMismatchError,
    TruncatedFileError,
    load_mnist,
    read_idx,
    sequence_rule_tags,
    split_dev,
    synth_linear_timing,
    synth_sequence_task,
    write_idx,
)


def make_idx_images(path, images):
    write_idx(path, np.asarray(images, dtype=np.uint8))


def make_idx_labels(path, labels):
    write_idx(path, np.asarray(labels, dtype=np.uint8))


@pytest.fixture
def tiny_mnist(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 4, 3), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([0, 1, 2, 9, 4, 5, 6], dtype=np.uint8)
    img_path = tmp_path / "imgs-idx3-ubyte"
    lab_path = tmp_path / "labs-idx1-ubyte"
    make_idx_images(img_path, images)
    make_idx_labels(lab_path, labels)
    return img_path, lab_path, images, labels


class TestIdxParsing:
    def test_magic_accepted(self, tiny_mnist):
        img_path, lab_path, images, labels = tiny_mnist
        with open(img_path, "rb") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x03"
        with open(lab_path, "rb") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x01"
        data = load_mnist(img_path, lab_path)
        assert len(data) == 7

    def test_label_nine_is_class_nine(self, tiny_mnist):
        img_path, lab_path, _, _ = tiny_mnist
        data = load_mnist(img_path, lab_path)
        assert data.labels[3] == 9

    def test_pixel_255_scales_to_one(self, tiny_mnist):
        img_path, lab_path, _, _ = tiny_mnist
        data = load_mnist(img_path, lab_path)
        assert data.features[0, 0] == 1.0
        assert data.features.max() <= 1.0
        assert data.features.min() >= 0.0

    def test_flattens_to_feature_vectors(self, tiny_mnist):
        img_path, lab_path, images, _ = tiny_mnist
        data = load_mnist(img_path, lab_path)
        assert data.features.shape == (7, 12)
        assert np.allclose(data.features[2], images[2].reshape(-1) / 255.0)

    def test_gzip_sniffing(self, tiny_mnist, tmp_path):
        img_path, lab_path, images, _ = tiny_mnist
        gz_path = tmp_path / "imgs.gz"
        with open(img_path, "rb") as fh, gzip.open(gz_path, "wb") as out:
            out.write(fh.read())
        assert np.array_equal(read_idx(gz_path), images)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(struct.pack(">i", 0x00000999) + b"\x00" * 8)
        with pytest.raises(BadMagicError):
            read_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(struct.pack(">iii", 0x00000803, 2, 2))  # missing dim+data
        with pytest.raises(TruncatedFileError):
            read_idx(path)
        path.write_bytes(struct.pack(">iiii", 0x00000803, 2, 2, 2) + b"\x00" * 3)
        with pytest.raises(TruncatedFileError):
            read_idx(path)

    def test_count_mismatch(self, tiny_mnist, tmp_path):
        img_path, _, _, _ = tiny_mnist
        lab_path = tmp_path / "labs2-idx1-ubyte"
        make_idx_labels(lab_path, np.array([1, 2], dtype=np.uint8))
        with pytest.raises(CountMismatchError):
            load_mnist(img_path, lab_path)

    def test_round_trip(self, tiny_mnist, tmp_path):
        img_path, lab_path, images, labels = tiny_mnist
        parsed = read_idx(img_path)
        out = tmp_path / "rewritten"
        write_idx(out, parsed)
        assert np.array_equal(read_idx(out), images)
        assert out.read_bytes() == img_path.read_bytes()
        parsed_labels = read_idx(lab_path)
        out2 = tmp_path / "rewritten-labels"
        write_idx(out2, parsed_labels)
        assert out2.read_bytes() == lab_path.read_bytes()


class TestSplitDev:
    def _dataset(self, n):
        rng = np.random.default_rng(1)
        from meprop import Dataset
        return Dataset(rng.standard_normal((n, 3)),
                       rng.integers(0, 4, size=n), 4, "train")

    def test_sizes(self):
        train, dev = split_dev(self._dataset(6000))
        assert len(dev) == 5000
        assert len(train) == 1000

    def test_dev_is_file_order_prefix(self):
        data = self._dataset(5005)
        train, dev = split_dev(data)
        assert np.array_equal(dev.features, data.features[:5000])
        assert np.array_equal(train.features, data.features[5000:])

    def test_disjoint(self):
        data = self._dataset(5010)
        data.features[:] = np.arange(5010)[:, None]
        train, dev = split_dev(data)
        assert not np.intersect1d(train.features[:, 0], dev.features[:, 0]).size

    def test_too_few_examples(self):
        with pytest.raises(ValueError):
            split_dev(self._dataset(4999))


class TestSynthetic:
    def test_linear_timing_deterministic(self):
        a = synth_linear_timing(8, 3, 50, seed=7)
        b = synth_linear_timing(8, 3, 50, seed=7)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_linear_timing_rejects_empty(self):
        with pytest.raises(ValueError):
            synth_linear_timing(8, 3, 0, seed=7)

    def test_sequence_rule_oracle_is_perfect_on_own_data(self):
        data = synth_sequence_task(12, 9, 40, seed=3)
        for tokens, tags in zip(data.features, data.labels):
            assert np.array_equal(sequence_rule_tags(tokens, 12), tags)

    def test_sequence_deterministic(self):
        a = synth_sequence_task(10, 5, 30, seed=2)
        b = synth_sequence_task(10, 5, 30, seed=2)
        assert a.features.tobytes() == b.features.tobytes()

    def test_seq_len_one_degenerates_to_classification(self):
        data = synth_sequence_task(10, 1, 20, seed=4)
        assert data.features.shape == (20, 1)
        assert data.labels.shape == (20, 1)


class TestBatchIterator:
    def _dataset(self, n=30):
        from meprop import Dataset
        rng = np.random.default_rng(5)
        return Dataset(rng.standard_normal((n, 2)),
                       rng.integers(0, 2, size=n), 2, "train")

    def test_epoch_visits_every_example_once(self):
        it = BatchIterator(self._dataset(), 7, seed=0)
        seen = np.concatenate([ids for ids, _, _ in it.batches(0)])
        assert sorted(seen.tolist()) == list(range(30))

    def test_order_is_pure_function_of_seed_and_epoch(self):
        it1 = BatchIterator(self._dataset(), 7, seed=3)
        it2 = BatchIterator(self._dataset(), 7, seed=3)
        assert np.array_equal(it1.order(5), it2.order(5))
        assert not np.array_equal(it1.order(0), it1.order(1))

    def test_batch_features_match_ids(self):
        data = self._dataset()
        it = BatchIterator(data, 4, seed=1)
        for ids, X, y in it.batches(2):
            assert np.array_equal(X, data.features[ids])
            assert np.array_equal(y, data.labels[ids])
