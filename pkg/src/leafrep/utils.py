"""Numeric helpers shared across the package.

All helpers operate on numpy arrays; none of them hold state.
"""
from __future__ import annotations

from typing import List, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import pearsonr


def sigmoid(margin):
    """Logistic link 1 / (1 + exp(-margin)), overflow-safe."""
    return expit(margin)


def logistic_loss(margin, y):
    """log(1 + exp(-y * margin)) for labels in {-1, +1}."""
    return np.logaddexp(0.0, -np.asarray(y, dtype=float) * np.asarray(margin, dtype=float))


def check_labels(y: np.ndarray) -> np.ndarray:
    """Return `y` as an int vector, raising if any entry is not -1 or +1."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"Labels must be a vector, got shape {y.shape}")
    bad = ~np.isin(y, (-1, 1))
    if bad.any():
        raise ValueError(
            f"Labels must be -1 or +1; found {np.unique(y[bad]).tolist()!r}"
        )
    return y.astype(int)


def labels_from_margin(margin) -> np.ndarray:
    """Predicted label +1 iff margin > 0."""
    return np.where(np.asarray(margin) > 0, 1, -1)


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("Accuracy of an empty label vector is undefined")
    return float(np.mean(y_true == np.asarray(y_pred)))


def pearson(a, b) -> float:
    """Pearson correlation; raises when either vector is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"Length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("Pearson correlation needs at least 2 points")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("Pearson correlation is undefined for a constant vector")
    return float(pearsonr(a, b)[0])


def standard_error(values) -> float:
    """Sample standard deviation / sqrt(count); 0 for a single value."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(np.std(v, ddof=1) / np.sqrt(v.size))


def derive_seeds(master_seed: int, repetitions: int, offset: int = 1000) -> List[int]:
    """Per-repetition seeds at a fixed offset from the master seed."""
    if repetitions < 1:
        raise ValueError(f"Need at least one repetition, got {repetitions}")
    return [master_seed + offset * r for r in range(repetitions)]


def stream_seed(seed: int, stream: int) -> int:
    """Child seed of `seed` for one consumer; distinct streams are independent."""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


def rank_descending(scores: np.ndarray, row_ids: Sequence[int]) -> np.ndarray:
    """Positions sorted by score descending, ties by ascending row id."""
    scores = np.asarray(scores, dtype=float)
    row_ids = np.asarray(row_ids)
    return np.lexsort((row_ids, -scores))


def top_count(fraction: float, n: int) -> int:
    """round(fraction * n) with halves rounded up."""
    return int(np.floor(fraction * n + 0.5))
