"""
Datasets, synthetic data, and minibatch construction.

All randomness goes through :func:`make_rng`, a PCG64 generator seeded with a
64-bit integer, so index sequences are reproducible across machines.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidParams, SpecInfeasible

RNG_ALGORITHM = "PCG64"


def make_rng(seed):
    """Portable seeded generator (numpy PCG64)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise InvalidParams(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidParams("need exactly one label per feature row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidParams(f"labels must lie in [0, {self.class_count})")
        counts = np.bincount(self.labels, minlength=self.class_count)
        if np.any(counts == 0):
            raise InvalidParams(f"class {int(np.flatnonzero(counts == 0)[0])} has no samples")

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        """Rows at ``indices`` with labels remapped densely in sorted order."""
        idx = np.asarray(indices, dtype=np.int64)
        kept, labels = np.unique(self.labels[idx], return_inverse=True)
        return Dataset(self.features[idx], labels, len(kept))


@dataclass(frozen=True)
class BatchSpec:
    """``classes_per_batch`` distinct classes times ``samples_per_class`` each."""

    classes_per_batch: int
    samples_per_class: int

    def __post_init__(self):
        if self.classes_per_batch < 1 or self.samples_per_class < 1:
            raise InvalidParams("classes_per_batch and samples_per_class must be positive")

    @property
    def batch_size(self):
        return self.classes_per_batch * self.samples_per_class


def generate_synthetic(class_count, per_class, feature_dim, center_scale=5.0,
                       noise_sigma=0.5, rng=None):
    """Gaussian blobs around random centers on a sphere of radius ``center_scale``.

    Rows are ordered class by class.
    """
    if class_count < 2 or per_class < 2 or feature_dim < 2:
        raise InvalidParams("need class_count >= 2, per_class >= 2 and feature_dim >= 2")
    if center_scale < 0 or noise_sigma < 0:
        raise InvalidParams("center_scale and noise_sigma must be non-negative")
    rng = make_rng(0) if rng is None else rng
    centers = rng.standard_normal((class_count, feature_dim))
    centers *= center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.standard_normal((labels.size, feature_dim))
    features = centers[labels] + noise_sigma * noise
    return Dataset(features, labels, class_count)


def class_centers(dataset):
    """Per-class mean feature vectors, shape ``(class_count, F)``."""
    sums = np.zeros((dataset.class_count, dataset.feature_dim))
    np.add.at(sums, dataset.labels, dataset.features)
    return sums / np.bincount(dataset.labels, minlength=dataset.class_count)[:, None]


def _indices_by_class(labels, class_count):
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(class_count + 1))
    return [order[bounds[c]:bounds[c + 1]] for c in range(class_count)]


def class_balanced_batches(labels, spec, rng, class_count=None):
    """One epoch of ``ceil(N / (C*S))`` batches of C classes times S samples.

    Classes are drawn without replacement within a batch (they may repeat
    across batches).  A class with fewer than S samples is drawn with
    replacement.
    """
    labels = np.asarray(labels, dtype=np.int64)
    class_count = int(labels.max()) + 1 if class_count is None else class_count
    members = _indices_by_class(labels, class_count)
    present = np.array([c for c in range(class_count) if members[c].size])
    if spec.classes_per_batch > present.size:
        raise SpecInfeasible(
            f"{spec.classes_per_batch} classes per batch but only {present.size} classes"
        )
    n_batches = math.ceil(labels.size / spec.batch_size)
    S = spec.samples_per_class
    batches = []
    for _ in range(n_batches):
        chosen = rng.choice(present, size=spec.classes_per_batch, replace=False)
        parts = [
            rng.choice(members[c], size=S, replace=members[c].size < S) for c in chosen
        ]
        batches.append(np.concatenate(parts))
    return batches


def sequential_batches(labels, batch_size, rng):
    """A random permutation of all indices cut into chunks; the last may be short."""
    if batch_size < 1:
        raise InvalidParams("batch_size must be >= 1")
    n = len(labels)
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def subsample_classes(batch_labels, class_count, ratio, rng):
    """Active class set for one iteration of subsampled softmax training.

    Always contains every class in ``batch_labels``; topped up uniformly
    without replacement to ``round(ratio * class_count)`` classes.
    Returns a sorted index array.
    """
    if not 0.0 < ratio <= 1.0:
        raise InvalidParams(f"ratio must lie in (0, 1], got {ratio}")
    required = np.unique(np.asarray(list(batch_labels), dtype=np.int64))
    target = max(required.size, int(math.floor(ratio * class_count + 0.5)))
    extra = target - required.size
    if extra <= 0:
        return required
    pool = np.setdiff1d(np.arange(class_count), required, assume_unique=True)
    picked = rng.choice(pool, size=extra, replace=False)
    return np.sort(np.concatenate([required, picked]))


def holdout_split(dataset, test_fraction, rng):
    """Split every class into train/test parts; both keep all classes."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidParams("test_fraction must lie in (0, 1)")
    train, test = [], []
    for idx in _indices_by_class(dataset.labels, dataset.class_count):
        if idx.size < 2:
            raise InvalidParams("every class needs at least two samples to split")
        idx = rng.permutation(idx)
        k = min(max(1, int(round(test_fraction * idx.size))), idx.size - 1)
        test.append(idx[:k])
        train.append(idx[k:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return (Dataset(dataset.features[train_idx], dataset.labels[train_idx], dataset.class_count),
            Dataset(dataset.features[test_idx], dataset.labels[test_idx], dataset.class_count))


def class_split(dataset, train_classes):
    """Open-set split: seen classes for training, the rest for evaluation."""
    seen = np.isin(dataset.labels, np.asarray(list(train_classes), dtype=np.int64))
    if seen.all() or not seen.any():
        raise InvalidParams("both sides of a class split must be non-empty")
    return dataset.subset(np.flatnonzero(seen)), dataset.subset(np.flatnonzero(~seen))


# -- CSV --------------------------------------------------------------------

def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _is_int(s):
    try:
        int(s)
    except ValueError:
        return False
    return True


def read_dataset_csv(path):
    """Parse ``label,f0,f1,...`` rows into a :class:`Dataset`.

    A first row whose feature fields are not numeric is treated as a header.
    Integer labels map to dense indices in ascending order, any other labels
    in order of first appearance.  Returns ``(dataset, label_names)``.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(f.strip() for f in r)]
    if rows and not all(_is_float(f) for f in rows[0][1:]):
        rows = rows[1:]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise FormatError(f"{path}: need a label column and at least one feature")
    raw_labels, feats = [], []
    for lineno, row in enumerate(rows, 1):
        if len(row) != width:
            raise FormatError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
        try:
            feats.append([float(f) for f in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: row {lineno}: {exc}") from None
        raw_labels.append(row[0].strip())

    if all(_is_int(s) for s in raw_labels):
        names = sorted({int(s) for s in raw_labels})
        lookup = {v: i for i, v in enumerate(names)}
        labels = [lookup[int(s)] for s in raw_labels]
        names = [str(v) for v in names]
    else:
        lookup = {}
        for s in raw_labels:
            lookup.setdefault(s, len(lookup))
        labels = [lookup[s] for s in raw_labels]
        names = list(lookup)
    features = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise FormatError(f"{path}: non-finite feature values")
    return Dataset(features, labels, len(names)), names


def write_dataset_csv(path, dataset, label_names=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for label, row in zip(dataset.labels, dataset.features):
            name = label_names[label] if label_names is not None else int(label)
            writer.writerow([name, *(repr(float(v)) for v in row)])
