import numpy as np
import pytest

from prcl.data import (DATASET_KINDS, Dataset, generate_dataset, load_csv, load_idx, read_idx, save_csv,
                       write_idx)


def test_two_moons_balanced():
    d = generate_dataset("two_moons", 200, 1)
    assert d.m == 200
    assert np.bincount(d.labels).tolist() == [100, 100]


@pytest.mark.parametrize("kind", DATASET_KINDS)
def test_same_seed_bit_identical(kind):
    a, b = generate_dataset(kind, 50, 9), generate_dataset(kind, 50, 9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != generate_dataset(kind, 50, 10).fingerprint()


def test_blobs_and_digits_balanced():
    assert np.bincount(generate_dataset("gaussian_blobs", 1000, 0).labels).tolist() == [100] * 10
    d = generate_dataset("digits8x8", 95, 0)
    assert d.sample_shape == (1, 8, 8)
    assert np.bincount(d.labels).tolist() == [10] * 5 + [9] * 5


def test_unknown_kind_lists_options():
    with pytest.raises(ValueError, match="two_moons"):
        generate_dataset("cifar", 10, 0)


def test_too_few_samples():
    with pytest.raises(ValueError):
        generate_dataset("two_moons", 1, 0)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), np.zeros(0))


def test_csv_round_trip(tmp_path):
    d = generate_dataset("digits8x8", 20, 3)
    save_csv(d, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", (1, 8, 8))
    assert np.array_equal(back.inputs, d.inputs)
    assert np.array_equal(back.labels, d.labels)


def test_idx_round_trip(tmp_path):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(imgs, tmp_path / "x.idx")
    write_idx(np.array([7, 1], dtype=np.uint8), tmp_path / "y.idx")
    assert np.array_equal(read_idx(tmp_path / "x.idx"), imgs)
    d = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert d.sample_shape == (1, 3, 4)
    assert d.labels.tolist() == [7, 1]
    assert d.inputs.max() == pytest.approx(23 / 255)
