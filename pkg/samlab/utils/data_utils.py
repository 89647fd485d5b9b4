import csv
import gzip
import json
import logging
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from samlab.errors import ArgumentError, DataError, FormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CHECKPOINT_MAGIC = b"SAMLAB01"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    """
    Classification: features (m, d) floats, labels (m,) ints.
    Sequence: features (m, T) token ids, labels (m, T) next-token ids.
    """

    kind: str
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    vocab: str = ""

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} label rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes}) in {self.split} split")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, split=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.kind, self.features[indices], self.labels[indices], self.num_classes,
                       split or self.split, self.vocab)

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])

    @staticmethod
    def concatenate(parts, split):
        head = parts[0]
        return Dataset(head.kind, np.concatenate([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]), head.num_classes, split, head.vocab)


# --------------------------------------------------------------
# MNIST (IDX)
# --------------------------------------------------------------

def _open_idx(directory, name):
    path = os.path.join(directory, name)
    if os.path.exists(path):
        with open(path, "rb") as f:
            return path, f.read()
    if os.path.exists(path + ".gz"):
        with gzip.open(path + ".gz", "rb") as f:
            return path + ".gz", f.read()
    raise FileNotFoundError(f"missing IDX file {path}")


def read_idx(path, raw, expected_magic):
    """
    Parse an IDX buffer. Header is a big-endian u32 magic whose low byte is
    the number of dimensions, then one big-endian u32 per dimension, then
    unsigned bytes.
    """
    if len(raw) < 4:
        raise FormatError("truncated header", path=path, offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path=path, offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated dimension fields", path=path, offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise FormatError(f"truncated data, expected {expected} bytes", path=path, offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=expected - header, offset=header).reshape(dims)


def _load_mnist_split(directory, split, limit):
    image_name, label_name = MNIST_FILES[split]
    image_path, image_raw = _open_idx(directory, image_name)
    label_path, label_raw = _open_idx(directory, label_name)
    images = read_idx(image_path, image_raw, IDX_IMAGE_MAGIC)
    labels = read_idx(label_path, label_raw, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", path=label_path, field="count")
    if limit:
        images, labels = images[:limit], labels[:limit]
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset("classification", features, labels.astype(np.int64), 10, split)


def load_mnist(directory, limit=0):
    train = _load_mnist_split(directory, "train", limit)
    test = _load_mnist_split(directory, "test", limit)
    logging.info(f"Loaded MNIST from {directory}: {len(train)} train / {len(test)} test")
    return train, test


def shift_dataset(dataset, intensity_bias=0.1, label_noise=0.1, seed=0):
    """
    Synthetic shifted copy of a classification split: pixels biased by a
    fixed intensity (clipped to [0, 1]) and labels of class c moved to
    c + 1 with probability label_noise * (c + 1) / classes.
    """
    rng = np.random.default_rng(seed)
    features = np.clip(dataset.features + intensity_bias, 0.0, 1.0)
    flip = rng.random(len(dataset)) < label_noise * (dataset.labels + 1) / dataset.num_classes
    labels = np.where(flip, (dataset.labels + 1) % dataset.num_classes, dataset.labels)
    return Dataset(dataset.kind, features, labels, dataset.num_classes, f"{dataset.split}-shifted")


# --------------------------------------------------------------
# Synthetic Gaussian task
# --------------------------------------------------------------

def gen_gaussian_task(classes, dim, per_class, shift_vector=None, seed=0, separation=3.0, sigma=1.0):
    if classes < 2 or per_class < 1 or dim < 1:
        raise ArgumentError("need classes >= 2, per_class >= 1 and dim >= 1")
    shift = np.zeros(dim) if shift_vector is None else np.asarray(shift_vector, dtype=np.float64)
    if np.ndim(shift) == 0:
        shift = np.full(dim, float(shift))
    if shift.shape != (dim,):
        raise ArgumentError(f"shift vector must have {dim} entries, got {shift.shape}")
    if not np.all(np.isfinite(shift)):
        raise ArgumentError("shift vector must be finite")

    rng = np.random.default_rng(seed)
    if classes == 2:
        means = np.zeros((2, dim))
        means[0, 0], means[1, 0] = -separation * sigma / 2.0, separation * sigma / 2.0
    else:
        means = rng.normal(size=(classes, dim))
        means *= separation * sigma / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(offset, split):
        features = np.concatenate([rng.normal(means[c] + offset, sigma, size=(per_class, dim)) for c in range(classes)])
        labels = np.repeat(np.arange(classes), per_class)
        order = rng.permutation(len(labels))
        return Dataset("classification", features[order], labels[order], classes, split)

    train = draw(np.zeros(dim), "train")
    test = draw(shift, "test")
    return train, test


# --------------------------------------------------------------
# Character corpus
# --------------------------------------------------------------

def load_char_corpus(path, window):
    if window < 1:
        raise ArgumentError("window must be at least 1")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text:
        raise DataError(f"empty corpus {path}")
    vocab = "".join(sorted(set(text)))
    index = {ch: i for i, ch in enumerate(vocab)}
    ids = np.fromiter((index[ch] for ch in text), dtype=np.int64, count=len(text))
    count = (len(ids) - 1) // window
    inputs = ids[:count * window].reshape(count, window)
    targets = ids[1:count * window + 1].reshape(count, window)
    logging.info(f"Loaded corpus {path}: {len(text)} characters, vocabulary {len(vocab)}, {count} windows")
    return Dataset("sequence", inputs, targets, len(vocab), "train", vocab)


def split_tail(dataset, fraction):
    """Last `fraction` of the rows become the test split."""
    n_test = int(math.floor(len(dataset) * fraction))
    n_train = len(dataset) - n_test
    return dataset.subset(np.arange(n_train), "train"), dataset.subset(np.arange(n_train, len(dataset)), "test")


# --------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    descriptor: dict
    params: np.ndarray


def save_checkpoint(path, params, model_descriptor, seed=0, config_digest=""):
    descriptor = json.dumps({"model": model_descriptor, "seed": seed, "config_digest": config_digest},
                            sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(params.data, dtype="<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(descriptor)))
        f.write(descriptor)
        f.write(struct.pack("<Q", data.size))
        f.write(data.tobytes())
    logging.info(f"Saved checkpoint {path} ({data.size} parameters)")


def load_checkpoint(path, expected_model=None):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic", path=path, field="magic")
    cursor = 8
    if len(raw) < cursor + 8:
        raise FormatError("truncated header", path=path, field="version")
    (version,) = struct.unpack_from("<I", raw, cursor)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, field="version")
    (desc_len,) = struct.unpack_from("<I", raw, cursor + 4)
    cursor += 8
    if len(raw) < cursor + desc_len + 8:
        raise FormatError("truncated descriptor", path=path, field="descriptor")
    try:
        descriptor = json.loads(raw[cursor:cursor + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable descriptor: {e}", path=path, field="descriptor") from e
    cursor += desc_len
    (count,) = struct.unpack_from("<Q", raw, cursor)
    cursor += 8
    if len(raw) - cursor != 8 * count:
        raise FormatError(f"parameter count {count} does not match {len(raw) - cursor} payload bytes",
                          path=path, field="count")
    if expected_model is not None and descriptor.get("model") != expected_model:
        raise FormatError(f"descriptor mismatch: checkpoint has {descriptor.get('model')}, model is {expected_model}",
                          path=path, field="descriptor")
    params = np.frombuffer(raw, dtype="<f8", count=count, offset=cursor).astype(np.float64)
    return Checkpoint(version, descriptor, params)


def restore_params(model, checkpoint):
    from samlab.utils.model_utils import ParamVector

    if checkpoint.descriptor.get("model") != model.descriptor():
        raise FormatError(f"descriptor mismatch: checkpoint has {checkpoint.descriptor.get('model')}, "
                          f"model is {model.descriptor()}", field="descriptor")
    if checkpoint.params.size != model.layout.size:
        raise FormatError(f"checkpoint holds {checkpoint.params.size} parameters, model needs {model.layout.size}",
                          field="count")
    return ParamVector(checkpoint.params.copy(), model.layout)


# --------------------------------------------------------------
# Metrics CSV
# --------------------------------------------------------------

def format_value(value):
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return format(value, ".17g") if math.isfinite(value) else "nan"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def metrics_path(directory, command, run_id):
    return os.path.join(directory, f"{command}-{run_id}.csv")


class MetricsSink:
    """
    Append-only CSV writer. The header is written once; reopening an
    existing file with the same header appends without repeating it.
    """

    def __init__(self, path, fieldnames):
        self.path = path
        self.fieldnames = list(fieldnames)
        exists = os.path.exists(path) and os.path.getsize(path) > 0
        if exists:
            with open(path, "r", newline="", encoding="utf-8") as f:
                header = next(csv.reader(f), [])
            if header != self.fieldnames:
                raise DataError(f"{path} already has header {header}, expected {self.fieldnames}")
        self._file = open(path, "a", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=self.fieldnames, lineterminator="\n")
        if not exists:
            self._writer.writeheader()
            self._file.flush()

    def write(self, row):
        unknown = set(row) - set(self.fieldnames)
        if unknown:
            raise ArgumentError(f"unknown metrics columns {sorted(unknown)}")
        self._writer.writerow({key: format_value(row.get(key, "")) for key in self.fieldnames})
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def metrics_sink(path, fieldnames):
    return MetricsSink(path, fieldnames)


def read_metrics(path):
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
