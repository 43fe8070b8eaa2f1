import numpy as np
import pandas as pd
import pytest

from leafrep.data import (
    CENSUS_LABEL,
    CENSUS_POSITIVE,
    Dataset,
    dataset_from_frame,
    flip_labels,
    inject_domain_mismatch,
    load_csv,
    make_census_like,
    make_separable,
    split,
)


def _toy(n=10):
    return Dataset(
        features=np.arange(2 * n, dtype=float).reshape(n, 2),
        labels=np.where(np.arange(n) % 3 == 0, 1, -1),
        feature_names=("a", "b"),
        row_ids=np.arange(n),
    )


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def test_dataset_is_read_only():
    data = _toy()
    with pytest.raises(ValueError):
        data.features[0, 0] = 99.0


@pytest.mark.parametrize("kwargs, message", [
    ({"labels": np.array([1, 0, -1])}, "-1 or \\+1"),
    ({"row_ids": np.array([0, 0, 1])}, "unique"),
    ({"feature_names": ("only",)}, "feature names"),
    ({"labels": np.array([1, -1])}, "Row count mismatch"),
])
def test_dataset_validation(kwargs, message):
    fields = dict(features=np.zeros((3, 2)), labels=np.array([1, -1, 1]),
                  feature_names=("a", "b"), row_ids=np.arange(3))
    fields.update(kwargs)
    with pytest.raises(ValueError, match=message):
        Dataset(**fields)


def test_subset_keeps_row_ids():
    part = _toy().subset([4, 1])
    assert part.row_ids.tolist() == [4, 1]
    assert part.features[0].tolist() == [8.0, 9.0]


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def test_load_csv_encodes_labels_and_categories(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(
        "age,color,income\n"
        "30,red,>50K\n"
        "45,blue,<=50K\n"
        "22,red,<=50K\n",
        encoding="utf-8",
    )
    data = load_csv(str(path), "income", ">50K")
    assert data.labels.tolist() == [1, -1, -1]
    assert data.feature_names == ("age", "color=blue", "color=red")
    assert data.column("age").tolist() == [30.0, 45.0, 22.0]
    assert data.column("color=red").tolist() == [1.0, 0.0, 1.0]


def test_load_csv_declared_categorical_numeric_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("zip,y\n1,a\n2,b\n1,b\n", encoding="utf-8")
    data = load_csv(str(path), "y", "a", categorical_columns=["zip"])
    assert data.feature_names == ("zip=1", "zip=2")


def test_load_csv_missing_file():
    with pytest.raises(FileNotFoundError):
        load_csv("does/not/exist.csv", "y", "1")


@pytest.mark.parametrize("body, message", [
    ("a,y\n1,1\n,0\n", "Missing value"),
    ("a,y\n1,1\nx,0\n", "Non-numeric"),
    ("a,b\n1,1\n", "Label column"),
])
def test_load_csv_rejects_bad_tables(tmp_path, body, message):
    path = tmp_path / "bad.csv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(ValueError, match=message):
        load_csv(str(path), "y", "1")


def test_empty_frame_is_rejected():
    with pytest.raises(ValueError, match="empty"):
        dataset_from_frame(pd.DataFrame({"y": []}), "y", "1")


# ---------------------------------------------------------------------------
# Splits and corruptions
# ---------------------------------------------------------------------------

def test_split_is_disjoint_sorted_and_seeded():
    data = _toy(50)
    train, test = split(data, 0.2, seed=3)
    assert test.n == 10 and train.n == 40
    assert not set(train.row_ids) & set(test.row_ids)
    assert list(train.row_ids) == sorted(train.row_ids)
    again_train, _ = split(data, 0.2, seed=3)
    assert np.array_equal(train.row_ids, again_train.row_ids)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split(_toy(), 1.0, seed=0)


def test_flip_labels_exact_count():
    data = _toy(10)
    flipped, record = flip_labels(data, 0.4, seed=7)
    assert record.count == 4
    assert np.sum(flipped.labels != data.labels) == 4
    assert np.array_equal(flipped.labels[record.flipped_mask], -data.labels[record.flipped_mask])
    assert np.array_equal(record.apply(flipped).labels, data.labels)
    assert record.to_dict()["flipped_row_ids"] == sorted(record.to_dict()["flipped_row_ids"])


def test_flip_labels_zero_fraction():
    data = _toy(10)
    flipped, record = flip_labels(data, 0.0, seed=1)
    assert record.count == 0
    assert np.array_equal(flipped.labels, data.labels)


@pytest.fixture(scope="module")
def income():
    return dataset_from_frame(make_census_like(n=1000, seed=1), CENSUS_LABEL, CENSUS_POSITIVE)


def test_inject_domain_mismatch_reduces_and_flips(income):
    before = int(np.sum(income.column("age") < 18))
    corrupted, record = inject_domain_mismatch(income, "age", 18, keep=50, flip=40, seed=2)
    group = corrupted.column("age") < 18
    assert group.sum() == 50
    assert corrupted.n == income.n - (before - 50)
    assert record.count == 40
    assert np.all(group[record.flipped_mask])
    assert np.all(corrupted.labels[record.flipped_mask] == 1)
    # rows outside the subgroup are unchanged
    outside = ~group
    original = income.subset(np.searchsorted(income.row_ids, corrupted.row_ids))
    assert np.array_equal(corrupted.labels[outside], original.labels[outside])


def test_inject_domain_mismatch_errors(income):
    with pytest.raises(ValueError, match="need at least"):
        inject_domain_mismatch(income, "age", 18, keep=10_000, flip=0, seed=0)
    with pytest.raises(ValueError, match="Cannot flip"):
        inject_domain_mismatch(income, "age", 18, keep=5, flip=6, seed=0)
    with pytest.raises(ValueError, match="not found"):
        inject_domain_mismatch(income, "height", 18, keep=5, flip=1, seed=0)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def test_make_census_like_is_deterministic():
    a = make_census_like(n=300, seed=4)
    b = make_census_like(n=300, seed=4)
    pd.testing.assert_frame_equal(a, b)
    assert set(a[CENSUS_LABEL]) <= {CENSUS_POSITIVE, "<=50K"}
    assert (a.loc[a["age"] < 18, CENSUS_LABEL] == "<=50K").all()
    assert (a["age"] == 17).sum() == 36


def test_make_separable_labels_follow_boundary():
    data = make_separable(n=100, seed=0, margin=0.2)
    score = data.features[:, 0] + 0.5 * data.features[:, 1]
    assert np.all(np.abs(score) > 0.2)
    assert np.array_equal(data.labels, np.where(score > 0, 1, -1))
