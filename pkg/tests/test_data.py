from __future__ import annotations

import warnings

import numpy as np
import pytest

from lossmap import data
from lossmap.errors import ContractError


def test_single_tile_is_all_zero():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = data.gen_checkerboard(4, 1, seed=0)
    assert ds.labels.tolist() == [0, 0, 0, 0]


def test_parity_formula():
    pts = np.array([[0.1, 0.1], [0.1, 0.6], [0.6, 0.6], [1.0, 1.0]])
    assert data.checkerboard_labels(pts, 2).tolist() == [0, 1, 0, 0]


def test_checkerboard_balance_and_parity():
    ds = data.gen_checkerboard(10000, 4, seed=123)
    assert 0.48 <= ds.labels.mean() <= 0.52
    assert np.array_equal(ds.labels, data.checkerboard_labels(ds.features, 4))
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert ds.feature_names == ("x", "y")


def test_checkerboard_reproducible_and_noisy():
    a = data.gen_checkerboard(500, 3, 0.2, seed=5)
    b = data.gen_checkerboard(500, 3, 0.2, seed=5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    flipped = (a.labels != data.checkerboard_labels(a.features, 3)).mean()
    assert 0.12 < flipped < 0.28
    assert not np.array_equal(a.features, data.gen_checkerboard(500, 3, 0.2, seed=6).features)


def test_checkerboard_errors_and_warning():
    with pytest.raises(ContractError):
        data.gen_checkerboard(10, 0)
    with pytest.raises(ContractError):
        data.gen_checkerboard(10, 2, label_noise=1.0)
    with pytest.warns(UserWarning):
        data.gen_checkerboard(10, 4)


def test_dataset_is_immutable_and_validated():
    ds = data.Dataset(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
    with pytest.raises(ContractError):
        data.Dataset(np.array([[np.inf, 0.0]]), np.array([0]))
    with pytest.raises(ContractError):
        data.Dataset(np.zeros((2, 2)), np.array([0, -1]))
    with pytest.raises(ContractError):
        data.Dataset(np.zeros((2, 2)), np.array([0]))


def test_one_hot_rejects_out_of_range_labels():
    ds = data.Dataset(np.zeros((3, 1)), np.array([0, 1, 2]))
    assert ds.one_hot(3).shape == (3, 3)
    with pytest.raises(ContractError):
        ds.one_hot(2)


def test_load_csv_with_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n")
    ds = data.load_csv(path, "label")
    assert ds.features.tolist() == [[1, 2], [3, 4], [5, 6]]
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.feature_names == ("a", "b")


def test_load_csv_index_on_headerless_twin(tmp_path):
    (tmp_path / "h.csv").write_text("label,a,b\n1,0.5,2\n0,1.5,3\n")
    (tmp_path / "n.csv").write_text("1,0.5,2\n0,1.5,3\n")
    by_name = data.load_csv(tmp_path / "h.csv", "label")
    by_index = data.load_csv(tmp_path / "n.csv", 0, has_header=False)
    assert np.array_equal(by_name.features, by_index.features)
    assert np.array_equal(by_name.labels, by_index.labels)


def test_load_csv_numeric_literals(tmp_path):
    path = tmp_path / "lit.csv"
    path.write_text("x,y,label\n1e-3,-2.5E+01,1\n")
    ds = data.load_csv(path)
    assert ds.features.tolist() == [[0.001, -25.0]]


def test_load_csv_errors_name_the_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,label\n1,2,0\n3,oops,1\n")
    with pytest.raises(ContractError, match="row 3, column 2"):
        data.load_csv(path)
    with pytest.raises(ContractError, match="label column"):
        data.load_csv(path, "missing")


def test_csv_round_trip(tmp_path):
    ds = data.gen_checkerboard(300, 4, seed=1)
    path = tmp_path / "cb.csv"
    data.save_csv(ds, path)
    assert path.read_text().splitlines()[0] == "x,y,label"
    back = data.load_csv(path)
    assert np.abs(back.features - ds.features).max() <= 1e-12
    assert np.array_equal(back.labels, ds.labels)


def test_standardize_hand_values():
    ds = data.Dataset(np.array([[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]]), np.array([0, 1, 0]))
    z = data.standardize(ds)
    assert np.abs(z.features[:, 0] - [-1.2247, 0.0, 1.2247]).max() < 1e-4
    assert z.features[:, 1].tolist() == [0.0, 0.0, 0.0]
    mean, std = z.standardization
    assert std[1] == 1.0 and mean[1] == 7.0


def test_standardize_idempotent_and_invertible():
    ds = data.gen_checkerboard(400, 4, seed=2)
    once = data.standardize(ds)
    twice = data.standardize(once)
    assert np.abs(once.features.mean(axis=0)).max() < 1e-9
    assert np.abs(once.features.std(axis=0) - 1).max() < 1e-9
    assert np.abs(twice.features - once.features).max() < 1e-9
    mean, std = twice.standardization
    assert np.abs(twice.features * std + mean - ds.features).max() < 1e-12


def test_standardize_needs_two_rows():
    with pytest.raises(ContractError):
        data.standardize(data.Dataset(np.zeros((1, 2)), np.array([0])))


def test_digest_and_split():
    ds = data.gen_checkerboard(100, 2, seed=0)
    assert ds.digest == data.gen_checkerboard(100, 2, seed=0).digest
    assert ds.digest != data.gen_checkerboard(100, 2, seed=1).digest
    train, test = ds.split(0.25, seed=3)
    assert len(train) + len(test) == 100 and len(train) == 25
