"""Objective functions and data: logistic regression with a bounded nonconvex
regularizer, LibSVM text parsing, synthetic data, equal partitioning over
workers, and without-replacement mini-batch sampling.

The objective over a dataset {(a_i, y_i)} with y_i in {-1, +1} is

    f(x) = mean_i log(1 + exp(-y_i <a_i, x>)) + lambda * sum_j x_j^2 / (1 + x_j^2)

Each worker's local objective is the mean of its own partition's logistic
terms plus the FULL regularizer, so the across-worker average reproduces
f(x) exactly when partitions have equal sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .core import LANE_DATA, LANE_SHUFFLE, RandomStream


class ParseError(ValueError):
    """Malformed LibSVM input; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


@dataclass
class Dataset:
    """Dense features (N x d) and labels in {-1, +1}."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a nonempty N x d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Partition:
    """Contiguous per-worker index ranges covering [0, N); sizes differ by at most 1."""

    bounds: tuple

    @classmethod
    def equal(cls, n_samples: int, n_workers: int) -> "Partition":
        if n_workers < 1 or n_workers > n_samples:
            raise ValueError(f"need 1 <= n_workers <= n_samples, got {n_workers} for N={n_samples}")
        cuts = np.linspace(0, n_samples, n_workers + 1).astype(int)
        return cls(tuple((int(cuts[i]), int(cuts[i + 1])) for i in range(n_workers)))

    @property
    def n_workers(self) -> int:
        return len(self.bounds)

    def worker_range(self, worker: int) -> range:
        lo, hi = self.bounds[worker]
        return range(lo, hi)

    def worker_size(self, worker: int) -> int:
        lo, hi = self.bounds[worker]
        return hi - lo


@dataclass
class ProblemSpec:
    """A dataset, the nonconvex-regularizer weight, and the worker partition."""

    dataset: Dataset
    lam: float
    partition: Partition

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def n_workers(self) -> int:
        return self.partition.n_workers


def _logistic_terms(features, labels, x):
    # log(1 + exp(z)) with z = -y <a, x>, computed as max(z,0) + log1p(exp(-|z|))
    z = -labels * (features @ x)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def regularizer(lam: float, x: np.ndarray) -> float:
    return lam * float(np.sum(x * x / (1.0 + x * x)))


def regularizer_gradient(lam: float, x: np.ndarray) -> np.ndarray:
    return lam * 2.0 * x / (1.0 + x * x) ** 2


def loss(spec: ProblemSpec, x: np.ndarray) -> float:
    """Full-dataset objective value at x."""
    data_term = float(np.mean(_logistic_terms(spec.dataset.features, spec.dataset.labels, x)))
    return data_term + regularizer(spec.lam, x)


def _data_gradient(features, labels, x):
    coeff = -labels * expit(-labels * (features @ x))
    return features.T @ coeff / len(labels)


def full_gradient(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Gradient of `loss` over the full dataset (the convergence-target quantity)."""
    return _data_gradient(spec.dataset.features, spec.dataset.labels, x) \
        + regularizer_gradient(spec.lam, x)


def evaluate(spec: ProblemSpec, x: np.ndarray):
    """(loss, full gradient) sharing one pass over the margins."""
    features, labels = spec.dataset.features, spec.dataset.labels
    z = -labels * (features @ x)
    loss_val = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))) \
        + regularizer(spec.lam, x)
    grad = features.T @ (-labels * expit(z)) / len(labels) + regularizer_gradient(spec.lam, x)
    return loss_val, grad


def local_gradient(spec: ProblemSpec, worker: int, x: np.ndarray,
                   batch: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of worker's local objective over `batch` (None = full partition).

    Batch indices are absolute dataset indices inside the worker's range.
    The full regularizer gradient is included once per worker.
    """
    lo, hi = spec.partition.bounds[worker]
    if batch is None:
        feats = spec.dataset.features[lo:hi]
        labs = spec.dataset.labels[lo:hi]
    else:
        batch = np.asarray(batch)
        if len(batch) == 0:
            raise ValueError("empty batch")
        if batch.min() < lo or batch.max() >= hi:
            raise ValueError(f"batch indices outside worker {worker} partition [{lo}, {hi})")
        feats = spec.dataset.features[batch]
        labs = spec.dataset.labels[batch]
    return _data_gradient(feats, labs, x) + regularizer_gradient(spec.lam, x)


def sample_batch(spec: ProblemSpec, worker: int, tau: int,
                 rng: np.random.Generator) -> np.ndarray:
    """tau distinct indices uniform without replacement from the worker's
    partition, in ascending order. tau = 0 means the full partition."""
    lo, hi = spec.partition.bounds[worker]
    size = hi - lo
    if tau == 0 or tau == size:
        return np.arange(lo, hi)
    if not (1 <= tau <= size):
        raise ValueError(f"tau={tau} outside [1, {size}] for worker {worker}")
    return np.sort(rng.choice(np.arange(lo, hi), size=tau, replace=False))


def parse_libsvm(source, dim: Optional[int] = None) -> Dataset:
    """Parse LibSVM text ("<label> <idx>:<val> ...", 1-based indices) into a
    dense Dataset.

    Labels may be +1/-1 or 0/1 (0 is remapped to -1). The dimension is the
    maximum feature index seen unless `dim` overrides it; absent entries
    are 0. `source` may be a path, a text stream, or a string of lines.
    """
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    elif isinstance(source, Path) or (
            isinstance(source, str) and source.strip() and "\n" not in source
            and Path(source).is_file()):
        lines = Path(source).read_text().splitlines()
    else:
        lines = str(source).splitlines()

    labels = []
    rows = []  # list of (indices, values)
    max_index = 0
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", line_no) from None
        if label not in (-1.0, 0.0, 1.0):
            raise ParseError(f"label must be one of -1, 0, +1, got {tokens[0]!r}", line_no)
        labels.append(-1.0 if label <= 0.0 else 1.0)
        idxs, vals = [], []
        for token in tokens[1:]:
            try:
                idx_text, val_text = token.split(":", 1)
                idx = int(idx_text)
                val = float(val_text)
            except ValueError:
                raise ParseError(f"bad feature token {token!r}", line_no) from None
            if idx < 1:
                raise ParseError(f"feature index must be >= 1, got {idx}", line_no)
            idxs.append(idx)
            vals.append(val)
        if idxs:
            max_index = max(max_index, max(idxs))
        rows.append((idxs, vals))

    if not rows:
        raise ParseError("no samples")
    d = dim if dim is not None else max_index
    if d < max_index:
        raise ParseError(f"dim override {d} smaller than max feature index {max_index}")
    if d < 1:
        raise ParseError("no features found and no dim override given")
    features = np.zeros((len(rows), d))
    for i, (idxs, vals) in enumerate(rows):
        for idx, val in zip(idxs, vals):
            features[i, idx - 1] = val
    return Dataset(features, np.array(labels))


def dump_libsvm(dataset: Dataset, target=None) -> str:
    """Serialize a Dataset back to LibSVM text (zeros omitted, 1-based indices)."""
    lines = []
    for i in range(dataset.n_samples):
        label = "+1" if dataset.labels[i] > 0 else "-1"
        parts = [label]
        row = dataset.features[i]
        for j in np.nonzero(row)[0]:
            parts.append(f"{j + 1}:{float(row[j])!r}")
        lines.append(" ".join(parts))
    text = "\n".join(lines) + "\n"
    if target is not None:
        Path(target).write_text(text)
    return text


def synthesize(n_samples: int, dim: int, noise: float,
               rng: np.random.Generator) -> Dataset:
    """Gaussian features with labels from a planted hyperplane, each label
    independently flipped with probability `noise` (0.5 = uncorrelated)."""
    if not (0.0 <= noise <= 1.0):
        raise ValueError(f"noise must be in [0, 1], got {noise}")
    features = rng.standard_normal((n_samples, dim))
    plane = rng.standard_normal(dim)
    labels = np.where(features @ plane >= 0.0, 1.0, -1.0)
    flips = rng.random(n_samples) < noise
    labels[flips] *= -1.0
    return Dataset(features, labels)


def build_problem(dataset: Dataset, lam: float, n_workers: int,
                  shuffle_rng: Optional[np.random.Generator] = None) -> ProblemSpec:
    """Shuffle the dataset rows (if an rng is given) and partition into
    contiguous equal blocks."""
    if shuffle_rng is not None:
        perm = shuffle_rng.permutation(dataset.n_samples)
        dataset = Dataset(dataset.features[perm], dataset.labels[perm])
    return ProblemSpec(dataset, lam, Partition.equal(dataset.n_samples, n_workers))


def synthetic_problem(n_samples: int, dim: int, noise: float, lam: float,
                      n_workers: int, seed: int) -> ProblemSpec:
    """Reproducible synthetic problem: dataset and shuffle both derive from `seed`."""
    stream = RandomStream(seed)
    data = synthesize(n_samples, dim, noise, stream.lane(0, 0, LANE_DATA))
    return build_problem(data, lam, n_workers, stream.lane(0, 0, LANE_SHUFFLE))
