"""Instance-attribution explanations and training-row orderings.

An `Explanation` splits a surrogate's decision value for one query into
per-training-row contributions alpha_i * yhat_i * gamma_i. An `Ordering`
ranks training rows most-important first; every ordering method here
(representer weights, losses, TEKNN, random) produces one, with ties broken
by ascending row id.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.neighbors import NearestNeighbors

from . import gbdt
from .data import Dataset, split
from .gbdt import TreeEnsemble
from .surrogate import Family, FidelityReport, SurrogateModel, decision, decisions, similarities
from .tree_kernel import (
    KernelKind, KernelMismatchError, KernelRep, check_compatible, dimension_for, feature_map, map_rows, transform,
)
from .utils import check_labels, logistic_loss, pearson, rank_descending

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ordering:
    method: str
    ranked_row_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ranked_row_ids, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=float)
        if ids.shape != scores.shape or ids.ndim != 1:
            raise ValueError("ranked_row_ids and scores must be vectors of equal length")
        if np.unique(ids).size != ids.size:
            raise ValueError("ranked_row_ids contains duplicates")
        if ids.size > 1:
            step = np.diff(scores)
            if np.any(step > 0):
                raise ValueError("scores must be non-increasing")
            if np.any((step == 0) & (np.diff(ids) < 0)):
                raise ValueError("tied scores must be ordered by ascending row id")
        object.__setattr__(self, "ranked_row_ids", ids)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_scores(cls, method: str, scores, row_ids) -> "Ordering":
        scores = np.asarray(scores, dtype=float)
        row_ids = np.asarray(row_ids, dtype=np.int64)
        if scores.shape != row_ids.shape:
            raise ValueError(f"Got {scores.size} scores for {row_ids.size} rows")
        order = rank_descending(scores, row_ids)
        return cls(method=method, ranked_row_ids=row_ids[order], scores=scores[order])

    @property
    def n(self) -> int:
        return int(self.ranked_row_ids.size)

    def top(self, count: int) -> np.ndarray:
        return self.ranked_row_ids[:count]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "rank": np.arange(1, self.n + 1),
            "row_id": self.ranked_row_ids,
            "score": self.scores,
        })

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass(frozen=True, eq=False)
class Explanation:
    """Per-training-row decomposition of one query's surrogate decision."""
    query_id: str
    row_ids: np.ndarray
    similarities: np.ndarray
    signed_weights: np.ndarray
    contributions: np.ndarray
    predicted_label: int
    decision: float

    def __post_init__(self):
        if not np.array_equal(self.contributions, self.signed_weights * self.similarities):
            raise ValueError("contributions must equal signed_weights * similarities")
        if self.predicted_label not in (-1, 1):
            raise ValueError(f"predicted_label must be -1 or +1, got {self.predicted_label}")

    def aligned(self) -> np.ndarray:
        """Contributions toward the predicted label; positive is excitatory."""
        return self.contributions * self.predicted_label

    def excitatory_mask(self) -> np.ndarray:
        return self.aligned() > 0

    def top_contributors(self, count: int) -> np.ndarray:
        """Row ids of the `count` largest positive (label-aligned) contributions."""
        ordering = Ordering.from_scores("contribution", self.aligned(), self.row_ids)
        positive = ordering.scores > 0
        return ordering.ranked_row_ids[positive][:count]

    def top_similar(self, count: int) -> np.ndarray:
        return Ordering.from_scores("similarity", self.similarities, self.row_ids).top(count)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "row_id": self.row_ids,
            "gamma": self.similarities,
            "signed_weight": self.signed_weights,
            "contribution": self.contributions,
        })

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Representer explanations
# ---------------------------------------------------------------------------

def _method_tag(model: SurrogateModel) -> str:
    return model.family.value.lower()


def _check_model(model: SurrogateModel, ensemble: TreeEnsemble) -> None:
    if model.fingerprint != ensemble.fingerprint:
        raise KernelMismatchError("Surrogate was fit on a different ensemble")


def global_importance(model: SurrogateModel) -> Ordering:
    """Training rows by |alpha| descending."""
    return Ordering.from_scores(_method_tag(model), np.abs(model.alphas), model.train_rep.row_ids)


def local_explanation(
    model: SurrogateModel,
    ensemble: TreeEnsemble,
    x_t,
    query_id: Optional[str] = None,
) -> Explanation:
    _check_model(model, ensemble)
    x_map = feature_map(ensemble, x_t, model.kind)
    gamma = similarities(model.train_rep, x_map)
    signed = model.alphas * model.target_labels
    return Explanation(
        query_id="query" if query_id is None else str(query_id),
        row_ids=model.train_rep.row_ids,
        similarities=gamma,
        signed_weights=signed,
        contributions=signed * gamma,
        predicted_label=gbdt.predict_label(ensemble, x_t),
        decision=decision(model, x_map),
    )


def _query_matrix(queries) -> np.ndarray:
    Q = np.asarray(queries, dtype=float)
    if Q.size == 0:
        raise ValueError("Need at least one query to aggregate")
    return np.atleast_2d(Q)


def query_rep(ensemble: TreeEnsemble, queries, kind: KernelKind) -> KernelRep:
    """Maps of ad-hoc query rows, bound to `ensemble`; row ids are 0..q-1."""
    Q = _query_matrix(queries)
    return KernelRep(
        kind=kind,
        dimension=dimension_for(ensemble, kind),
        fingerprint=ensemble.fingerprint,
        matrix=map_rows(ensemble, Q, kind),
        row_ids=np.arange(Q.shape[0], dtype=np.int64),
    )


def aggregate_explanations(model: SurrogateModel, ensemble: TreeEnsemble, queries) -> Ordering:
    """Rank training rows by summed label-aligned contribution over `queries`."""
    _check_model(model, ensemble)
    Q = _query_matrix(queries)
    gamma = model.train_rep.cross(query_rep(ensemble, Q, model.kind))  # (n, q)
    predicted = gbdt.predict_label(ensemble, Q)
    scores = model.alphas * model.target_labels * (gamma @ predicted)
    return Ordering.from_scores(_method_tag(model), scores, model.train_rep.row_ids)


# ---------------------------------------------------------------------------
# Loss and random orderings
# ---------------------------------------------------------------------------

def loss_ordering(losses, row_ids=None, method: str = "loss") -> Ordering:
    """Highest loss first."""
    losses = np.asarray(losses, dtype=float)
    if row_ids is None:
        row_ids = np.arange(losses.size)
    return Ordering.from_scores(method, losses, row_ids)


def gbdt_loss_ordering(ensemble: TreeEnsemble, train: Dataset) -> Ordering:
    losses = gbdt.instance_loss(ensemble, train.features, train.labels)
    return loss_ordering(losses, train.row_ids, method="gbdt_loss")


def surrogate_loss_ordering(model: SurrogateModel, train: Dataset) -> Ordering:
    """Logistic loss of the surrogate's decision against the observed labels."""
    if not np.array_equal(model.train_rep.row_ids, train.row_ids):
        raise ValueError("Surrogate was not fit on these training rows")
    losses = logistic_loss(decisions(model, model.train_rep), train.labels)
    return loss_ordering(losses, train.row_ids, method="surrogate_loss")


def random_ordering(n: int, seed: int, row_ids=None) -> Ordering:
    """Seeded uniform permutation, scored n..1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids, dtype=np.int64)
    if row_ids.size != n:
        raise ValueError(f"Got {row_ids.size} row ids for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return Ordering(method="random", ranked_row_ids=row_ids[perm], scores=np.arange(n, 0, -1, dtype=float))


# ---------------------------------------------------------------------------
# TEKNN
# ---------------------------------------------------------------------------

def default_k_grid(n: int) -> List[int]:
    """Odd k in [3, 61] below n."""
    return [k for k in range(3, 62, 2) if k < n]


@dataclass(frozen=True, eq=False)
class TEKNNModel:
    """k-nearest neighbours under Euclidean distance in feature-map space."""
    k: int
    train_rep: KernelRep
    target_labels: np.ndarray
    index: NearestNeighbors = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.k < self.train_rep.n:
            raise ValueError(f"k must be in [1, n) with n={self.train_rep.n}, got {self.k}")
        labels = check_labels(np.asarray(self.target_labels))
        if labels.size != self.train_rep.n:
            raise ValueError(f"Got {labels.size} labels for {self.train_rep.n} mapped rows")
        object.__setattr__(self, "target_labels", labels)
        index = NearestNeighbors(n_neighbors=self.k, algorithm="brute", metric="euclidean")
        object.__setattr__(self, "index", index.fit(self.train_rep.matrix))

    @property
    def kind(self) -> KernelKind:
        return self.train_rep.kind

    @property
    def fingerprint(self) -> str:
        return self.train_rep.fingerprint

    def neighbors(self, query_rep: KernelRep, exclude_self: bool = False) -> np.ndarray:
        """(q, k) training positions of each query's neighbours, nearest first.

        With `exclude_self`, query row j never counts training row j
        (query_rep must be the training rep).
        """
        check_compatible(self.kind, self.fingerprint, query_rep.kind, query_rep.fingerprint)
        if not exclude_self:
            return self.index.kneighbors(query_rep.matrix, n_neighbors=self.k, return_distance=False)
        if query_rep.n != self.train_rep.n:
            raise ValueError("exclude_self needs the training representation as the query")
        nb = self.index.kneighbors(query_rep.matrix, n_neighbors=self.k + 1, return_distance=False)
        keep = nb != np.arange(nb.shape[0])[:, None]
        # self lost a distance-0 tie to duplicates; drop the farthest instead
        keep[keep.all(axis=1), -1] = False
        return nb[keep].reshape(nb.shape[0], self.k)


def teknn_predict_proba(model: TEKNNModel, rep: KernelRep) -> np.ndarray:
    """Share of +1 predicted labels among each query's k neighbours."""
    nb = model.neighbors(rep)
    return np.mean(model.target_labels[nb] == 1, axis=1)


def teknn_fit(
    rep: KernelRep,
    yhat,
    k_grid: Sequence[int],
    validation: Dataset,
    ensemble: TreeEnsemble,
) -> TEKNNModel:
    """Fit on `rep` with the k of best validation fidelity (ties to smaller k)."""
    yhat = check_labels(np.asarray(yhat))
    if yhat.size != rep.n:
        raise ValueError(f"Got {yhat.size} labels for {rep.n} mapped rows")
    if not k_grid:
        raise ValueError("k grid is empty")
    too_big = [k for k in k_grid if k >= rep.n]
    if too_big:
        raise ValueError(f"k must be smaller than n={rep.n}; got {too_big}")
    if validation.n < 2:
        raise ValueError(f"Validation set has {validation.n} row(s); need at least 2")
    if rep.fingerprint != ensemble.fingerprint:
        raise KernelMismatchError("Kernel representation was built from a different ensemble")

    valid_rep = transform(ensemble, validation, rep.kind)
    target = gbdt.predict_proba(ensemble, validation.features)
    best: Optional[Tuple[int, float]] = None
    for k in sorted(set(int(k) for k in k_grid)):
        model = TEKNNModel(k=k, train_rep=rep, target_labels=yhat)
        try:
            r = pearson(teknn_predict_proba(model, valid_rep), target)
        except ValueError as e:
            logger.warning("TEKNN k=%d skipped: %s", k, e)
            continue
        logger.debug("TEKNN/%s k=%d: validation pearson %.4f", rep.kind, k, r)
        if best is None or r > best[1]:
            best = (k, r)
    if best is None:
        raise ValueError(f"No k in {list(k_grid)} gave a defined validation correlation")
    logger.info("Selected TEKNN k=%d (validation pearson %.4f)", best[0], best[1])
    return TEKNNModel(k=best[0], train_rep=rep, target_labels=yhat)


def tune_teknn(
    ensemble: TreeEnsemble,
    train: Dataset,
    kind: KernelKind,
    k_grid: Optional[Sequence[int]] = None,
    *,
    seed: int = 0,
    validation_fraction: float = 0.1,
) -> Tuple[int, FidelityReport, TEKNNModel]:
    """Choose k on a held-out share of `train`, then refit on all of it."""
    kind = kind if isinstance(kind, KernelKind) else KernelKind.parse(kind)
    fit_part, valid = split(train, validation_fraction, seed)
    grid = default_k_grid(fit_part.n) if k_grid is None else list(k_grid)
    rep_fit = transform(ensemble, fit_part, kind)
    chosen = teknn_fit(rep_fit, gbdt.predict_label(ensemble, fit_part.features), grid, valid, ensemble)
    r = pearson(
        teknn_predict_proba(chosen, transform(ensemble, valid, kind)),
        gbdt.predict_proba(ensemble, valid.features),
    )
    report = FidelityReport(pearson=r, n_eval=valid.n, family=Family.KNN, kind=kind)
    model = TEKNNModel(
        k=min(chosen.k, train.n - 1),
        train_rep=transform(ensemble, train, kind),
        target_labels=gbdt.predict_label(ensemble, train.features),
    )
    return model.k, report, model


def teknn_fidelity(model: TEKNNModel, ensemble: TreeEnsemble, eval_data: Dataset) -> FidelityReport:
    if model.fingerprint != ensemble.fingerprint:
        raise KernelMismatchError("TEKNN model was fit on a different ensemble")
    rep = transform(ensemble, eval_data, model.kind)
    r = pearson(teknn_predict_proba(model, rep), gbdt.predict_proba(ensemble, eval_data.features))
    return FidelityReport(pearson=r, n_eval=eval_data.n, family=Family.KNN, kind=model.kind)


def teknn_density_ordering(model: TEKNNModel, rep: Optional[KernelRep] = None) -> Ordering:
    """Rank training rows by how often they sit in other rows' k-neighbourhoods."""
    rep = model.train_rep if rep is None else rep
    if rep.n != model.train_rep.n or not np.array_equal(rep.row_ids, model.train_rep.row_ids):
        raise ValueError("Density ordering needs the model's own training representation")
    nb = model.neighbors(rep, exclude_self=True)
    counts = np.bincount(nb.ravel(), minlength=rep.n).astype(float)
    return Ordering.from_scores("teknn", counts, rep.row_ids)


def teknn_aggregate(model: TEKNNModel, ensemble: TreeEnsemble, queries) -> Ordering:
    """Neighbour votes: +1 when a neighbour's yhat matches the query's prediction, -1 otherwise."""
    if model.fingerprint != ensemble.fingerprint:
        raise KernelMismatchError("TEKNN model was fit on a different ensemble")
    Q = _query_matrix(queries)
    nb = model.neighbors(query_rep(ensemble, Q, model.kind))
    predicted = gbdt.predict_label(ensemble, Q)
    votes = np.where(model.target_labels[nb] == predicted[:, None], 1.0, -1.0)
    scores = np.zeros(model.train_rep.n)
    np.add.at(scores, nb.ravel(), votes.ravel())
    return Ordering.from_scores("teknn", scores, model.train_rep.row_ids)
