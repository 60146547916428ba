"""Datasets: IDX file loading, a planted regression problem, minibatching."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .linalg import Array, ShapeError, as_array, check_finite

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass
class Dataset:
    """A batch-indexable split: float64 inputs plus labels or target vectors."""

    inputs: Array
    targets: Array
    split: str = "train"

    def __post_init__(self):
        self.inputs = check_finite(as_array(self.inputs, ndim=2), "inputs")
        targets = np.asarray(self.targets)
        if targets.ndim == 1:
            if not np.issubdtype(targets.dtype, np.integer):
                raise ValueError("1-d targets must be integer labels")
            self.targets = targets.astype(np.int64)
        elif targets.ndim == 2:
            self.targets = check_finite(as_array(targets, ndim=2), "targets")
        else:
            raise ShapeError(f"targets must be 1-d or 2-d, got {targets.shape}")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, n: int) -> "Dataset":
        """First n samples, order preserved."""
        if not (1 <= n <= len(self)):
            raise ValueError(f"subset size {n} not in [1, {len(self)}]")
        return Dataset(self.inputs[:n], self.targets[:n], self.split)


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    raw = head + rest
    if head == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _read_u32(buf: bytes, offset: int, path, what: str) -> int:
    if len(buf) < offset + 4:
        raise ValueError(
            f"{path}: truncated while reading {what} at offset {offset}"
        )
    return struct.unpack_from(">I", buf, offset)[0]


def _parse_idx(path, expect_magic: int):
    """Big-endian IDX: magic, then one u32 per dimension, then raw bytes."""
    buf = _read_file(path)
    magic = _read_u32(buf, 0, path, "magic")
    if magic != expect_magic:
        raise ValueError(
            f"{path}: bad magic {magic} at offset 0, expected {expect_magic}"
        )
    ndim = 1 if expect_magic == IDX_LABEL_MAGIC else 3
    dims = [
        _read_u32(buf, 4 + 4 * i, path, f"dimension {i}") for i in range(ndim)
    ]
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(buf) - start < count:
        raise ValueError(
            f"{path}: truncated data, expected {count} bytes at offset {start}, "
            f"got {len(buf) - start}"
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=start)
    return dims, data


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an IDX image/label file pair (raw or gzipped).

    Pixels are scaled to [0, 1] and flattened row-major; labels stay as
    integers. The two files must agree on the sample count.
    """
    (n_img, rows, cols), pixels = _parse_idx(images_path, IDX_IMAGE_MAGIC)
    (n_lab,), labels = _parse_idx(labels_path, IDX_LABEL_MAGIC)
    if n_img != n_lab:
        raise ValueError(
            f"count mismatch: {images_path} has {n_img} images, "
            f"{labels_path} has {n_lab} labels"
        )
    inputs = pixels.astype(np.float64).reshape(n_img, rows * cols) / 255.0
    return Dataset(inputs, labels.astype(np.int64), split)


@dataclass
class SyntheticRegressionProblem:
    """Planted linear targets y = theta_star x with sign-matrix theta_star."""

    theta_star: Array
    inputs: Array
    targets: Array

    def dataset(self, split: str = "train") -> Dataset:
        return Dataset(self.inputs, self.targets, split)


def make_binary_regression(d0: int, d1: int, S: int,
                           seed: int) -> SyntheticRegressionProblem:
    """Gaussian inputs, targets from a planted theta_star in {-1, +1}^(d1 x d0).

    Deterministic in seed. The zero-loss solution is theta_star itself, so
    recovery can be checked exactly.
    """
    if min(d0, d1, S) < 1:
        raise ValueError(f"d0, d1, S must be >= 1, got {d0}, {d1}, {S}")
    rng = np.random.default_rng(seed)
    theta_star = rng.choice([-1.0, 1.0], size=(d1, d0))
    inputs = rng.standard_normal((S, d0))
    return SyntheticRegressionProblem(
        theta_star=theta_star,
        inputs=inputs,
        targets=inputs @ theta_star.T,
    )


def minibatches(ds: Dataset, batch_size: int, rng):
    """Yield (inputs, targets) over a shuffled partition of ds.

    rng is a numpy Generator or an int seed. Passing the same Generator
    across epochs gives a fresh order each epoch while staying reproducible
    run to run; every sample appears in exactly one batch.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.inputs[idx], ds.targets[idx]
