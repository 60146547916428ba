import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from msanet.data import (
    Dataset,
    load_mnist_idx,
    make_binary_regression,
    minibatches,
)
from msanet.linalg import ShapeError

MNIST_DIR = Path(__file__).resolve().parent.parent / "data" / "mnist"


def _idx_images(dims, pixels) -> bytes:
    return struct.pack(">I", 2051) \
        + b"".join(struct.pack(">I", d) for d in dims) \
        + bytes(pixels)


def _idx_labels(labels) -> bytes:
    return struct.pack(">II", 2049, len(labels)) + bytes(labels)


# dataset container ----------------------------------------------------------

def test_dataset_accepts_labels_and_vector_targets():
    ds = Dataset(np.zeros((3, 2)), np.array([0, 1, 2]))
    assert len(ds) == 3
    assert ds.input_dim == 2
    assert ds.targets.dtype == np.int64
    Dataset(np.zeros((3, 2)), np.zeros((3, 4)))


def test_dataset_rejects_bad_targets():
    with pytest.raises(ValueError, match="integer labels"):
        Dataset(np.zeros((3, 2)), np.array([0.0, 1.0, 2.0]))
    with pytest.raises(ShapeError, match="1-d or 2-d"):
        Dataset(np.zeros((3, 2)), np.zeros((3, 2, 2)))
    with pytest.raises(ShapeError, match="inputs vs"):
        Dataset(np.zeros((3, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]))


def test_dataset_subset_bounds():
    ds = Dataset(np.arange(8.0).reshape(4, 2), np.array([0, 1, 0, 1]))
    sub = ds.subset(2)
    assert np.array_equal(sub.inputs, ds.inputs[:2])
    assert np.array_equal(sub.targets, np.array([0, 1]))
    for n in (0, 5):
        with pytest.raises(ValueError, match="subset size"):
            ds.subset(n)


# IDX parsing ----------------------------------------------------------------

def test_idx_round_trip_from_crafted_bytes(tmp_path):
    pixels = [0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60]
    img = tmp_path / "images"
    lab = tmp_path / "labels"
    img.write_bytes(_idx_images((3, 2, 2), pixels))
    lab.write_bytes(_idx_labels([7, 0, 9]))
    ds = load_mnist_idx(img, lab, split="train")
    assert ds.inputs.shape == (3, 4)
    assert np.allclose(ds.inputs[0], np.array([0, 51, 102, 153]) / 255.0)
    assert ds.inputs[1, 1] == 1.0
    assert np.array_equal(ds.targets, np.array([7, 0, 9]))
    assert ds.split == "train"


def test_idx_gzipped_files_are_detected_by_content(tmp_path):
    img = tmp_path / "images.gz"
    lab = tmp_path / "labels.gz"
    img.write_bytes(gzip.compress(_idx_images((2, 1, 2), [1, 2, 3, 4])))
    lab.write_bytes(gzip.compress(_idx_labels([1, 0])))
    ds = load_mnist_idx(img, lab)
    assert ds.inputs.shape == (2, 2)
    assert np.array_equal(ds.targets, np.array([1, 0]))


def test_idx_bad_magic_reports_path_and_offset(tmp_path):
    img = tmp_path / "images"
    img.write_bytes(struct.pack(">I", 1234) + b"\x00" * 16)
    lab = tmp_path / "labels"
    lab.write_bytes(_idx_labels([0]))
    with pytest.raises(ValueError) as err:
        load_mnist_idx(img, lab)
    msg = str(err.value)
    assert "bad magic 1234 at offset 0" in msg
    assert str(img) in msg
    assert "2051" in msg


def test_idx_truncated_header(tmp_path):
    img = tmp_path / "images"
    img.write_bytes(struct.pack(">II", 2051, 1))  # missing two dimensions
    lab = tmp_path / "labels"
    lab.write_bytes(_idx_labels([0]))
    with pytest.raises(ValueError, match="truncated while reading dimension"):
        load_mnist_idx(img, lab)


def test_idx_truncated_data(tmp_path):
    img = tmp_path / "images"
    img.write_bytes(_idx_images((2, 2, 2), [0] * 5))  # 8 bytes promised
    lab = tmp_path / "labels"
    lab.write_bytes(_idx_labels([0, 1]))
    with pytest.raises(ValueError, match="expected 8 bytes at offset 16"):
        load_mnist_idx(img, lab)


def test_idx_image_label_count_mismatch(tmp_path):
    img = tmp_path / "images"
    img.write_bytes(_idx_images((2, 1, 1), [0, 1]))
    lab = tmp_path / "labels"
    lab.write_bytes(_idx_labels([0, 1, 2]))
    with pytest.raises(ValueError, match="count mismatch"):
        load_mnist_idx(img, lab)


@pytest.mark.skipif(not MNIST_DIR.exists(), reason="dataset files not staged")
def test_real_dataset_loads_with_expected_shape():
    ds = load_mnist_idx(
        MNIST_DIR / "train-images-idx3-ubyte.gz",
        MNIST_DIR / "train-labels-idx1-ubyte.gz",
    )
    assert ds.inputs.shape == (60000, 784)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
    assert set(np.unique(ds.targets)) == set(range(10))


# synthetic regression -------------------------------------------------------

def test_binary_regression_is_deterministic_and_realizable():
    a = make_binary_regression(8, 4, 100, seed=3)
    b = make_binary_regression(8, 4, 100, seed=3)
    assert np.array_equal(a.theta_star, b.theta_star)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.all(np.abs(a.theta_star) == 1.0)
    assert np.array_equal(a.targets, a.inputs @ a.theta_star.T)
    ds = a.dataset()
    assert len(ds) == 100 and ds.input_dim == 8


def test_binary_regression_different_seeds_differ():
    a = make_binary_regression(8, 4, 100, seed=3)
    b = make_binary_regression(8, 4, 100, seed=4)
    assert not np.array_equal(a.inputs, b.inputs)


def test_binary_regression_validates_sizes():
    with pytest.raises(ValueError, match="must be >= 1"):
        make_binary_regression(0, 4, 10, seed=0)


def test_binary_regression_inputs_are_near_isotropic():
    # the planted problem is identifiable because the Gram matrix of the
    # inputs concentrates near the identity
    prob = make_binary_regression(8, 4, 10000, seed=5)
    gram = prob.inputs.T @ prob.inputs / 10000
    dev = float(np.max(np.abs(gram - np.eye(8))))
    assert dev <= 5.0 / np.sqrt(10000)


# minibatching ---------------------------------------------------------------

def _small_ds(n=10):
    return Dataset(np.arange(n, dtype=np.float64).reshape(n, 1),
                   np.arange(n))


def test_minibatches_partition_sizes_and_coverage():
    ds = _small_ds(10)
    batches = list(minibatches(ds, 3, np.random.default_rng(0)))
    assert [len(xb) for xb, _ in batches] == [3, 3, 3, 1]
    seen = np.sort(np.concatenate([xb[:, 0] for xb, _ in batches]))
    assert np.array_equal(seen, np.arange(10.0))
    for xb, yb in batches:
        assert np.array_equal(xb[:, 0].astype(np.int64), yb)


def test_minibatches_large_batch_is_one_shuffled_pass():
    ds = _small_ds(10)
    batches = list(minibatches(ds, 100, np.random.default_rng(1)))
    assert len(batches) == 1
    assert len(batches[0][0]) == 10


def test_minibatches_same_generator_gives_fresh_orders():
    ds = _small_ds(10)
    rng = np.random.default_rng(2)
    first = np.concatenate([yb for _, yb in minibatches(ds, 4, rng)])
    second = np.concatenate([yb for _, yb in minibatches(ds, 4, rng)])
    assert not np.array_equal(first, second)
    assert np.array_equal(np.sort(first), np.sort(second))


def test_minibatches_int_seed_is_reproducible():
    ds = _small_ds(10)
    first = np.concatenate([yb for _, yb in minibatches(ds, 4, 7)])
    second = np.concatenate([yb for _, yb in minibatches(ds, 4, 7)])
    assert np.array_equal(first, second)


def test_minibatches_rejects_bad_batch_size():
    with pytest.raises(ValueError, match="batch_size"):
        list(minibatches(_small_ds(), 0, 0))
