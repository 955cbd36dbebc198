"""MNIST IDX ingestion, deterministic batching, and synthetic generators."""

import gzip
import struct

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Dataset:
    """Fixed examples plus labels under a split tag.

    ``features`` is an (N, d) float64 matrix for vector tasks or an
    (N, T) integer token matrix for sequence tasks (``vocab`` set);
    ``labels`` is (N,) for classification or (N, T) for tagging.
    """

    __slots__ = ("features", "labels", "num_classes", "split", "vocab")

    def __init__(self, features, labels, num_classes, split, vocab=None):
        if split not in ("train", "dev", "test"):
            raise ValueError(f"unknown split tag {split!r}")
        if len(features) != len(labels):
            raise CountMismatchError(
                f"{len(features)} feature rows vs {len(labels)} labels"
            )
        if np.min(labels) < 0 or np.max(labels) >= num_classes:
            raise ValueError(
                f"labels must lie in [0, {num_classes}), got range "
                f"[{np.min(labels)}, {np.max(labels)}]"
            )
        self.features = features
        self.labels = labels
        self.num_classes = int(num_classes)
        self.split = split
        self.vocab = None if vocab is None else int(vocab)

    def __len__(self):
        return len(self.features)

    @property
    def is_sequence(self):
        return self.vocab is not None


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Parse one big-endian IDX file into a uint8 ndarray.

    Accepts plain or gzip-compressed input (sniffed by magic bytes).
    """
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise TruncatedFileError(f"{path}: missing magic number")
        (magic,) = struct.unpack(">i", header)
        if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
            raise BadMagicError(
                f"{path}: magic 0x{magic:08x} is neither image "
                f"(0x{IDX_IMAGES_MAGIC:08x}) nor label (0x{IDX_LABELS_MAGIC:08x})"
            )
        ndim = magic & 0xFF
        dims = []
        for _ in range(ndim):
            raw = fh.read(4)
            if len(raw) < 4:
                raise TruncatedFileError(f"{path}: header ends inside dimensions")
            dims.append(struct.unpack(">i", raw)[0])
        expected = int(np.prod(dims))
        payload = fh.read(expected)
        if len(payload) < expected:
            raise TruncatedFileError(
                f"{path}: payload has {len(payload)} bytes, header promises "
                f"{expected}"
            )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Serialize a uint8 ndarray back to IDX (1-D labels or 3-D images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError(f"IDX writer handles 1-D or 3-D arrays, got {array.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">i", magic))
        for dim in array.shape:
            fh.write(struct.pack(">i", dim))
        fh.write(array.tobytes())


def load_mnist(images_path, labels_path, split="train"):
    """Load an MNIST image/label pair into a flattened, scaled Dataset.

    Pixels are divided by 255 into [0, 1]; images flatten to 784-vectors.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise BadMagicError(f"{images_path}: expected a 3-D image file")
    if labels.ndim != 1:
        raise BadMagicError(f"{labels_path}: expected a 1-D label file")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), 10, split)


def split_dev(train, dev_size=5000):
    """First dev_size examples in file order become the dev set."""
    if len(train) < dev_size:
        raise ValueError(
            f"need at least {dev_size} examples to split, got {len(train)}"
        )
    dev = Dataset(train.features[:dev_size], train.labels[:dev_size],
                  train.num_classes, "dev", train.vocab)
    rest = Dataset(train.features[dev_size:], train.labels[dev_size:],
                   train.num_classes, "train", train.vocab)
    return rest, dev


def synth_linear_timing(n_features, n_outputs, n_examples, seed, split="train"):
    """Standard-normal features labelled by a fixed random linear teacher."""
    if n_examples < 1:
        raise ValueError(f"n_examples must be >= 1, got {n_examples}")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((n_outputs, n_features))
    X = rng.standard_normal((n_examples, n_features))
    labels = np.argmax(X @ teacher.T, axis=1).astype(np.int64)
    return Dataset(X, labels, n_outputs, split)


def sequence_rule_tags(tokens, vocab):
    """Deterministic tag rule: the tag at t combines the coarse classes of
    the current and previous token; position 0 sees class 0 on its left."""
    tokens = np.asarray(tokens)
    cls = tokens * 3 // vocab
    prev = np.concatenate([[0], cls[:-1]])
    return (cls + prev) % 3


def synth_sequence_task(vocab, seq_len, n_examples, seed, split="train"):
    """Token sequences tagged by sequence_rule_tags; 3 tag classes."""
    if n_examples < 1:
        raise ValueError(f"n_examples must be >= 1, got {n_examples}")
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(n_examples, seq_len), dtype=np.int64)
    tags = np.stack([sequence_rule_tags(row, vocab) for row in tokens])
    return Dataset(tokens, tags, 3, split, vocab=vocab)


class BatchIterator:
    """Deterministic epoch shuffling: order is a pure function of
    (seed, epoch). Every epoch visits each example exactly once."""

    def __init__(self, dataset, batch_size, seed):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)

    def order(self, epoch):
        rng = np.random.default_rng([self.seed, int(epoch)])
        return rng.permutation(len(self.dataset))

    def batches(self, epoch):
        """Yield (ids, features, labels) batches for one epoch."""
        data = self.dataset
        order = self.order(epoch)
        if data.is_sequence:
            for start in range(0, len(order), self.batch_size):
                ids = order[start:start + self.batch_size]
                yield ids, [data.features[i] for i in ids], \
                    [data.labels[i] for i in ids]
        else:
            for start in range(0, len(order), self.batch_size):
                ids = order[start:start + self.batch_size]
                yield ids, data.features[ids], data.labels[ids]
