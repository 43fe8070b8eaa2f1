"""Tabular data for leafrep.

Loads labelled CSV data into an immutable `Dataset`, produces seeded splits,
and injects the label corruptions the experiments rely on (random label
flips and a subgroup domain mismatch). Also generates the desk-scale
synthetic tables the harness and tests run on.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .utils import check_labels, sigmoid, top_count

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled instances: n rows x d real-valued features, labels in {-1, +1}."""
    features: np.ndarray
    labels: np.ndarray
    feature_names: Tuple[str, ...]
    row_ids: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise ValueError(f"Features must be a 2-D matrix, got shape {features.shape}")
        labels = check_labels(self.labels)
        row_ids = np.asarray(self.row_ids, dtype=np.int64)
        n, d = features.shape
        if labels.shape[0] != n or row_ids.shape[0] != n:
            raise ValueError(
                f"Row count mismatch: features {n}, labels {labels.shape[0]}, "
                f"row_ids {row_ids.shape[0]}"
            )
        if len(self.feature_names) != d:
            raise ValueError(f"Expected {d} feature names, got {len(self.feature_names)}")
        if np.unique(row_ids).size != n:
            raise ValueError("row_ids must be unique")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "row_ids", _frozen(row_ids))
        object.__setattr__(self, "feature_names", tuple(str(f) for f in self.feature_names))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def column(self, name: str) -> np.ndarray:
        """Values of the named feature column."""
        try:
            j = self.feature_names.index(name)
        except ValueError:
            raise ValueError(
                f"Column '{name}' not found; available: {list(self.feature_names)}"
            ) from None
        return self.features[:, j]

    def subset(self, positions: Sequence[int]) -> "Dataset":
        """Rows at the given positions, in the given order."""
        idx = np.asarray(positions, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            feature_names=self.feature_names,
            row_ids=self.row_ids[idx],
        )

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features,
            labels=labels,
            feature_names=self.feature_names,
            row_ids=self.row_ids,
        )

    def positive_rate(self) -> float:
        return float(np.mean(self.labels == 1)) if self.n else 0.0


@dataclass(frozen=True, eq=False)
class CorruptionRecord:
    """Which rows of a dataset had their label inverted, and how."""
    flipped_mask: np.ndarray
    seed: int
    fraction: float
    row_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        mask = np.asarray(self.flipped_mask, dtype=bool)
        row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if row_ids.size == 0:
            row_ids = np.arange(mask.size, dtype=np.int64)
        if row_ids.shape != mask.shape:
            raise ValueError("flipped_mask and row_ids must have the same length")
        object.__setattr__(self, "flipped_mask", _frozen(mask))
        object.__setattr__(self, "row_ids", _frozen(row_ids))

    @property
    def count(self) -> int:
        return int(self.flipped_mask.sum())

    @property
    def flipped_row_ids(self) -> np.ndarray:
        return self.row_ids[self.flipped_mask]

    def apply(self, data: Dataset) -> Dataset:
        """Negate the labels of the masked rows; applying twice is the identity."""
        if data.n != self.flipped_mask.size:
            raise ValueError(
                f"Mask covers {self.flipped_mask.size} rows, dataset has {data.n}"
            )
        labels = np.where(self.flipped_mask, -data.labels, data.labels)
        return data.with_labels(labels)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": int(self.seed),
            "fraction": float(self.fraction),
            "flipped_row_ids": [int(r) for r in self.flipped_row_ids],
        }


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_csv(
    path: str,
    label_column: str,
    positive_value: str,
    categorical_columns: Optional[Sequence[str]] = None,
) -> Dataset:
    """Load a headed, comma-delimited UTF-8 CSV into a Dataset.

    Labels are +1 where the label cell equals `positive_value`, else -1.
    Columns listed in `categorical_columns`, and columns with no numeric cells
    at all, are one-hot expanded. A column mixing numeric and non-numeric cells
    is rejected, as is any empty cell.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Data file '{path}' not found")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    data = dataset_from_frame(frame, label_column, positive_value, categorical_columns)
    logger.info(
        "Loaded %s: %d rows, %d features, positive rate %.3f",
        path, data.n, data.d, data.positive_rate(),
    )
    return data


def dataset_from_frame(
    frame: pd.DataFrame,
    label_column: str,
    positive_value: str,
    categorical_columns: Optional[Sequence[str]] = None,
) -> Dataset:
    """Encode a raw table (label column included) into a Dataset."""
    if frame.shape[0] == 0:
        raise ValueError("Dataset is empty")
    if label_column not in frame.columns:
        raise ValueError(
            f"Label column '{label_column}' not found; columns: {list(frame.columns)}"
        )

    raw_labels = frame[label_column].astype(str).str.strip()
    labels = np.where(raw_labels == str(positive_value).strip(), 1, -1)

    declared = set(categorical_columns or [])
    unknown = declared - set(frame.columns)
    if unknown:
        raise ValueError(f"Categorical columns not in data: {sorted(unknown)}")

    features = frame.drop(columns=[label_column])
    numeric: Dict[str, pd.Series] = {}
    categorical = []
    for col in features.columns:
        cells = features[col].astype(str).str.strip()
        empty = cells == ""
        if pd.api.types.is_numeric_dtype(features[col]):
            empty = empty | features[col].isna().to_numpy()
            cells = features[col].astype(float)
        if np.any(empty):
            row = int(np.flatnonzero(np.asarray(empty))[0])
            raise ValueError(f"Missing value in column '{col}' at data row {row}")
        if col in declared:
            categorical.append(col)
            continue
        parsed = pd.to_numeric(cells, errors="coerce")
        bad = parsed.isna().to_numpy()
        if not bad.any():
            numeric[col] = parsed.astype(float)
        elif bad.all():
            categorical.append(col)
        else:
            row = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"Non-numeric cell {cells.iloc[row]!r} in numeric column '{col}' "
                f"at data row {row}"
            )

    encoded = features.copy()
    for col, values in numeric.items():
        encoded[col] = values.to_numpy()
    if categorical:
        for col in categorical:
            encoded[col] = encoded[col].astype(str).str.strip()
        encoded = pd.get_dummies(encoded, columns=categorical, prefix_sep="=", dtype=float)
        logger.debug("One-hot expanded columns: %s", categorical)

    return Dataset(
        features=encoded.to_numpy(dtype=float),
        labels=labels,
        feature_names=tuple(encoded.columns),
        row_ids=np.arange(frame.shape[0]),
    )


# ---------------------------------------------------------------------------
# Splits and corruptions
# ---------------------------------------------------------------------------

def split(data: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded disjoint train/test partition; each part keeps input row order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if data.n < 2:
        raise ValueError(f"Need at least 2 rows to split, got {data.n}")
    n_test = min(max(top_count(test_fraction, data.n), 1), data.n - 1)
    perm = np.random.default_rng(seed).permutation(data.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


def flip_labels(data: Dataset, fraction: float, seed: int) -> Tuple[Dataset, CorruptionRecord]:
    """Negate exactly round(fraction * n) labels chosen uniformly without replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"Flip fraction must be in [0, 1], got {fraction}")
    k = top_count(fraction, data.n)
    mask = np.zeros(data.n, dtype=bool)
    mask[np.random.default_rng(seed).permutation(data.n)[:k]] = True
    record = CorruptionRecord(flipped_mask=mask, seed=seed, fraction=fraction, row_ids=data.row_ids)
    logger.debug("Flipped %d / %d labels (seed %d)", k, data.n, seed)
    return record.apply(data), record


def inject_domain_mismatch(
    data: Dataset,
    predicate_column: str,
    threshold: float,
    keep: int,
    flip: int,
    seed: int,
) -> Tuple[Dataset, CorruptionRecord]:
    """Shrink the subgroup {column < threshold} to `keep` rows and flip `flip` of them to +1.

    Rows outside the subgroup are untouched. Only kept rows labelled -1 are
    eligible for flipping.
    """
    if keep < 0 or flip < 0:
        raise ValueError(f"keep and flip must be non-negative, got keep={keep}, flip={flip}")
    if flip > keep:
        raise ValueError(f"Cannot flip {flip} rows when keeping only {keep}")
    values = data.column(predicate_column)
    subgroup = np.flatnonzero(values < threshold)
    if subgroup.size < keep:
        raise ValueError(
            f"Subgroup {predicate_column} < {threshold} has {subgroup.size} rows; "
            f"need at least {keep}"
        )

    rng = np.random.default_rng(seed)
    kept = np.sort(rng.permutation(subgroup)[:keep])
    retain = np.setdiff1d(np.arange(data.n), np.setdiff1d(subgroup, kept))
    reduced = data.subset(retain)

    kept_pos = np.searchsorted(retain, kept)
    negatives = kept_pos[reduced.labels[kept_pos] == -1]
    if negatives.size < flip:
        raise ValueError(
            f"Only {negatives.size} kept subgroup rows are negative; cannot flip {flip}"
        )
    chosen = np.sort(rng.permutation(negatives)[:flip])
    mask = np.zeros(reduced.n, dtype=bool)
    mask[chosen] = True

    fraction = flip / reduced.n if reduced.n else 0.0
    record = CorruptionRecord(flipped_mask=mask, seed=seed, fraction=fraction, row_ids=reduced.row_ids)
    logger.info(
        "Domain mismatch: subgroup %s < %s reduced %d -> %d rows, %d flipped to +1",
        predicate_column, threshold, subgroup.size, keep, flip,
    )
    return record.apply(reduced), record


# ---------------------------------------------------------------------------
# Synthetic desk-scale data
# ---------------------------------------------------------------------------

CENSUS_LABEL = "label"
CENSUS_POSITIVE = ">50K"
_WORKCLASSES = ("Private", "Self-emp", "Gov")


def make_census_like(n: int = 2000, seed: int = 0, minor_fraction: float = 0.12) -> pd.DataFrame:
    """Income-style table with an `age` column and a block of all-negative 17-year-olds.

    Returns the raw frame (label column `label`, positive value `>50K`) so it
    can be written to CSV and read back through `load_csv`.
    """
    if n < 10:
        raise ValueError(f"n must be at least 10, got {n}")
    rng = np.random.default_rng(seed)
    n_minor = top_count(minor_fraction, n)
    n_adult = n - n_minor

    age = np.concatenate([
        np.full(n_minor, 17),
        np.clip(rng.normal(40, 12, n_adult), 18, 90).astype(int),
    ])
    education = np.clip(np.round(rng.normal(10, 2.5, n) + np.where(age < 18, -2, 0)), 1, 16).astype(int)
    hours = np.clip(np.round(rng.normal(40, 10, n)), 1, 99).astype(int)
    gain = np.where(rng.random(n) < 0.08, np.round(rng.exponential(8000, n)), 0.0)
    workclass = rng.choice(_WORKCLASSES, size=n, p=[0.7, 0.15, 0.15])

    logit = (
        -8.5
        + 0.06 * np.minimum(age, 55)
        + 0.35 * education
        + 0.04 * hours
        + 0.0003 * gain
        + np.select([workclass == "Self-emp", workclass == "Gov"], [0.3, 0.2], 0.0)
    )
    positive = rng.random(n) < sigmoid(logit)
    positive[age < 18] = False

    frame = pd.DataFrame({
        "age": age,
        "education_years": education,
        "hours_per_week": hours,
        "capital_gain": gain.astype(int),
        "workclass": workclass,
        CENSUS_LABEL: np.where(positive, CENSUS_POSITIVE, "<=50K"),
    })
    return frame.iloc[rng.permutation(n)].reset_index(drop=True)


def make_separable(n: int = 100, seed: int = 0, margin: float = 0.2) -> Dataset:
    """Two uniform features with labels sign(x0 + 0.5 x1), keeping a gap around the boundary."""
    rng = np.random.default_rng(seed)
    rows = []
    while sum(len(r) for r in rows) < n:
        x = rng.uniform(-1.0, 1.0, size=(2 * n, 2))
        rows.append(x[np.abs(x[:, 0] + 0.5 * x[:, 1]) > margin])
    x = np.vstack(rows)[:n]
    labels = np.where(x[:, 0] + 0.5 * x[:, 1] > 0, 1, -1)
    return Dataset(features=x, labels=labels, feature_names=("x0", "x1"), row_ids=np.arange(n))
