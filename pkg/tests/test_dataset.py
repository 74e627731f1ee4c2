import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_data
from fairmtl.dataset import (ADULT_COLUMNS, DatasetError, group_partition, load_adult,
                             load_dataset, load_generic_csv, load_internal_csv,
                             save_internal_csv, stratified_folds, stratified_split)

ADULT_ROWS = [
    "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K",
    "50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, >50K",
    "38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, Black, Female, 0, 0, 40, United-States, <=50K",
    "53, ?, 234721, 11th, 7, Married-civ-spouse, ?, Husband, Black, Male, 0, 0, 40, United-States, <=50K",
    "28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, >50K",
]
ADULT_TEST_ROWS = [
    "|1x3 Cross validator",
    "25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, <=50K.",
    "44, Private, 160323, Some-college, 10, Married-civ-spouse, Machine-op-inspct, Husband, Black, Female, 7688, 0, 40, United-States, >50K.",
]


@pytest.fixture
def mini_adult(tmp_path):
    (tmp_path / "adult.data").write_text("\n".join(ADULT_ROWS) + "\n")
    (tmp_path / "adult.test").write_text("\n".join(ADULT_TEST_ROWS) + "\n")
    return tmp_path


def test_two_point_standardization(tmp_path):
    path = tmp_path / "two.csv"
    path.write_text("x,s,y\n0,a,1\n10,b,-1\n")
    data = load_generic_csv(path, label_column="y", sensitive_spec="s", positive_label="1")
    assert (data.k, data.d) == (2, 1)
    assert sorted(data.X[:, 0]) == [-1.0, 1.0]
    assert data.labels[data.X[:, 0] < 0][0] == 1


def test_mini_adult_parsing(mini_adult):
    data = load_adult(mini_adult, "G")
    # the row with "?" is dropped, the test header line skipped, the trailing "." stripped
    assert data.n == 6
    assert data.is_test.sum() == 2
    # 2 vs 2 training rows: the tie is broken by name
    assert data.group_names == ("Female", "Male")
    assert list(data.labels[data.is_test]) == [-1, 1]
    assert not any(name.startswith("sex=") for name in data.feature_names)
    kept = load_adult(mini_adult, "G", missing="keep")
    assert kept.n == 7
    assert kept.group_names == ("Male", "Female")
    assert "workclass=?" in kept.feature_names


def test_mini_adult_sensitive_columns(mini_adult):
    data = load_adult(mini_adult, "G", include_sensitive=True)
    assert data.feature_names[-2:] == ("sex=Female", "sex=Male")
    assert data.n_base == data.d - 2
    male = data.groups == data.group_names.index("Male") + 1
    assert np.all(data.X[male, -1] == 1) and np.all(data.X[~male, -2] == 1)
    flipped = data.with_model_groups(3 - data.groups)
    assert np.array_equal(flipped.X[:, :-2], data.X[:, :-2])
    assert np.all(flipped.X[male, -2] == 1) and np.all(flipped.X[male, -1] == 0)
    assert np.array_equal(flipped.groups, data.groups)


def test_drop_fnlwgt(mini_adult):
    assert "fnlwgt" in load_adult(mini_adult, "G").feature_names
    assert "fnlwgt" not in load_adult(mini_adult, "G", drop_fnlwgt=True).feature_names


def test_loader_errors(tmp_path, mini_adult):
    with pytest.raises(DatasetError):
        load_dataset(mini_adult, "parquet")
    with pytest.raises(DatasetError):
        load_adult(mini_adult, ["no-such-column"])
    path = tmp_path / "three.csv"
    path.write_text("x,s,y\n0,a,1\n1,b,2\n2,a,3\n")
    with pytest.raises(DatasetError, match="non-binary"):
        load_generic_csv(path, label_column="y", sensitive_spec="s")


def test_group_partition_counts():
    data = make_data([0.0, 1.0, 2.0, 3.0], [1, 1, 2, 2], [1, -1, 1, 1])
    gi = group_partition(data)
    assert list(gi.n) == [2, 2]
    assert list(gi.n_pos) == [1, 2] and list(gi.n_neg) == [1, 0]


def test_folds_balanced_example():
    data = make_data(np.arange(20.0), np.repeat([1, 2], 10), np.tile([1, -1], 10))
    folds = stratified_folds(data, 10, seed=0)
    assert len(folds) == 10
    for _, val in folds:
        assert len(val) == 2
        for t in (1, 2):
            for y in (1, -1):
                count = np.sum((data.groups[val] == t) & (data.labels[val] == y))
                assert abs(count - 0.5) <= 1


def test_folds_proportional_example():
    groups = np.array([1] * 30 + [2] * 10)
    labels = np.tile([1, -1], 20)
    data = make_data(np.arange(40.0), groups, labels)
    for _, val in stratified_folds(data, 10, seed=3):
        assert np.sum(data.groups[val] == 1) == 3
        assert np.sum(data.groups[val] == 2) == 1


def test_folds_deterministic_and_seeded():
    data = make_data(np.arange(40.0), np.repeat([1, 2], 20), np.tile([1, -1], 20))
    a, b = stratified_folds(data, 5, 7), stratified_folds(data, 5, 7)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    c = stratified_folds(data, 5, 8)
    assert not all(np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_folds_empty_cell():
    data = make_data(np.arange(4.0), [1, 1, 2, 2], [1, -1, 1, 1])
    with pytest.raises(DatasetError, match="group 2"):
        stratified_folds(data, 2, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.lists(st.integers(1, 3), min_size=4, max_size=4),
       st.integers(0, 100), st.integers(0, 30))
def test_folds_partition_property(n_folds, cell_multipliers, extra, seed):
    sizes = [m * n_folds + (extra + i) % n_folds for i, m in enumerate(cell_multipliers)]
    groups = np.repeat([1, 1, 2, 2], sizes)
    labels = np.repeat([1, -1, 1, -1], sizes)
    data = make_data(np.zeros(len(groups)), groups, labels)
    folds = stratified_folds(data, n_folds, seed)
    vals = np.concatenate([v for _, v in folds])
    assert np.array_equal(np.sort(vals), np.arange(data.n))
    for tr, va in folds:
        assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == data.n
        for size, (t, y) in zip(sizes, [(1, 1), (1, -1), (2, 1), (2, -1)]):
            count = np.sum((data.groups[va] == t) & (data.labels[va] == y))
            assert abs(count - size / n_folds) < 1


def test_stratified_split_fraction():
    groups = np.repeat([1, 2], [600, 400])
    labels = np.tile([1, -1, -1, -1], 250)
    mask = stratified_split(groups, labels, 0.3, seed=1)
    assert abs(mask.mean() - 0.3) < 0.01
    for t in (1, 2):
        assert abs(mask[groups == t].mean() - 0.3) < 0.01


def test_internal_round_trip(tmp_path, rng):
    X = rng.normal(size=(15, 3))
    data = make_data(X, np.arange(15) % 3 + 1, np.where(X[:, 0] > 0, 1, -1))
    path = tmp_path / "snap.csv"
    save_internal_csv(data, path)
    back = load_internal_csv(path)
    assert (back.k, back.d, back.n) == (data.k, data.d, data.n)
    assert np.array_equal(back.X, data.X)
    assert np.array_equal(back.groups, data.groups)
    assert np.array_equal(back.labels, data.labels)


def test_internal_directory(tmp_path, rng):
    X = rng.normal(size=(12, 2))
    data = make_data(X, np.arange(12) % 2 + 1, np.tile([1, -1, -1], 4),
                     is_test=np.arange(12) >= 8)
    save_internal_csv(data.train(), tmp_path / "train.csv")
    save_internal_csv(data.test(), tmp_path / "test.csv")
    back = load_dataset(tmp_path, "internal")
    assert np.array_equal(back.is_test, data.is_test)
    assert np.array_equal(back.X, data.X)


def test_adult_counts_and_standardization(raw_dir):
    data = load_adult(raw_dir, "G")
    assert data.n == 45222
    assert (~data.is_test).sum() == 30162 and data.is_test.sum() == 15060
    assert data.k == 2
    train = data.train()
    cont = [data.feature_names.index(c) for c in ADULT_COLUMNS
            if c in data.feature_names]
    assert len(cont) == 6
    assert np.all(np.abs(train.X[:, cont].mean(axis=0)) < 1e-9)
    assert np.all(np.abs(train.X[:, cont].std(axis=0) - 1) < 1e-9)


def test_adult_gender_race_groups(raw_dir):
    assert load_adult(raw_dir, "G+R").k == 10
    assert load_adult(raw_dir, "R").k == 5


def test_sensitive_columns_never_encoded(raw_dir):
    data = load_adult(raw_dir, "R")
    assert not any(n.startswith("race=") for n in data.feature_names)
    with_s = load_adult(raw_dir, "R", include_sensitive=True)
    assert np.array_equal(with_s.base_features(), data.X)
