"""Kernelized surrogates of a tree ensemble.

Fits kernel logistic regression (KLR) or an L1-hinge SVM on the ensemble's
own predicted labels by dual coordinate descent over the tree-kernel feature
maps. The dual weights `alphas` are the representer values of the training
rows; the decision value of a query is

    f(x) = sum_i alpha_i * yhat_i * k(x_i, x) = w . phi(x),
    w    = sum_i alpha_i * yhat_i * phi(x_i).

Q_ij = yhat_i yhat_j k(x_i, x_j) is never stored; every coordinate step reads
Q alpha through `w`.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, xlogy

from . import gbdt
from .data import Dataset, split
from .gbdt import TreeEnsemble
from .tree_kernel import FeatureMap, KernelKind, KernelMismatchError, KernelRep, check_compatible, transform
from .utils import check_labels, pearson, sigmoid

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_EPOCHS = 1000


class Family(str, Enum):
    KLR = "KLR"
    SVM = "SVM"
    KNN = "KNN"

    @classmethod
    def parse(cls, name: str) -> "Family":
        try:
            return cls(str(name).strip().upper())
        except ValueError:
            raise ValueError(f"Unknown surrogate family {name!r}; expected KLR, SVM or KNN") from None

    def __str__(self) -> str:
        return self.value


def default_C_grid() -> List[float]:
    """Log-spaced C values over [1e-2, 1e2]."""
    return [float(c) for c in np.logspace(-2, 2, 5)]


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    family: Family
    C: float
    alphas: np.ndarray
    target_labels: np.ndarray
    train_rep: KernelRep
    primal_weights: np.ndarray
    epochs: int = 0
    converged: bool = True
    seed: int = 0

    @property
    def kind(self) -> KernelKind:
        return self.train_rep.kind

    @property
    def fingerprint(self) -> str:
        return self.train_rep.fingerprint

    @property
    def n(self) -> int:
        return int(self.alphas.size)

    def support_mask(self, atol: float = 1e-9) -> np.ndarray:
        """Rows with non-zero dual weight."""
        return self.alphas > atol

    def objective(self) -> float:
        return dual_objective(self.train_rep, self.target_labels, self.alphas, self.C, self.family)

    def contributions(self, x_map: FeatureMap) -> np.ndarray:
        """alpha_i * yhat_i * k(x_i, x) for every training row."""
        gamma = similarities(self.train_rep, x_map)
        return self.alphas * self.target_labels * gamma

    # ------------------------------------------------------------------ #
    # Serialization
    # ------------------------------------------------------------------ #

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family.value,
            "C": self.C,
            "kind": self.kind.value,
            "fingerprint": self.fingerprint,
            "alphas": self.alphas.tolist(),
            "target_labels": self.target_labels.tolist(),
            "primal_norm": float(np.linalg.norm(self.primal_weights)),
            "epochs": self.epochs,
            "converged": self.converged,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], train_rep: KernelRep) -> "SurrogateModel":
        """Rebuild against `train_rep`; primal weights are recomputed and checked."""
        kind = KernelKind.parse(raw["kind"])
        check_compatible(kind, raw["fingerprint"], train_rep.kind, train_rep.fingerprint)
        family = Family.parse(raw["family"])
        C = float(raw["C"])
        alphas = np.asarray(raw["alphas"], dtype=float)
        yhat = check_labels(np.asarray(raw["target_labels"]))
        if alphas.size != train_rep.n or yhat.size != train_rep.n:
            raise ValueError(
                f"Stored model has {alphas.size} weights, kernel representation has {train_rep.n} rows"
            )
        if np.any(alphas < 0) or np.any(alphas > C):
            raise ValueError(f"Stored alphas fall outside [0, {C}]")
        w = _primal(train_rep, yhat, alphas)
        stored = raw.get("primal_norm")
        if stored is not None:
            norm = float(np.linalg.norm(w))
            if abs(norm - stored) > 1e-10 * max(1.0, abs(stored)):
                raise ValueError(f"Primal weights do not reproduce: norm {norm} vs stored {stored}")
        return cls(
            family=family, C=C, alphas=alphas, target_labels=yhat, train_rep=train_rep,
            primal_weights=w, epochs=int(raw.get("epochs", 0)),
            converged=bool(raw.get("converged", True)), seed=int(raw.get("seed", 0)),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str, train_rep: KernelRep) -> "SurrogateModel":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Surrogate file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f), train_rep)


@dataclass(frozen=True)
class FidelityReport:
    pearson: float
    n_eval: int
    family: Family
    kind: KernelKind

    def __post_init__(self):
        if self.n_eval < 2:
            raise ValueError(f"Fidelity needs at least 2 evaluation rows, got {self.n_eval}")

    def to_dict(self) -> Dict[str, Any]:
        return {"pearson": self.pearson, "n_eval": self.n_eval,
                "family": self.family.value, "kind": self.kind.value}


# ---------------------------------------------------------------------------
# Dual objective
# ---------------------------------------------------------------------------

def _primal(rep: KernelRep, yhat: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    return np.asarray(rep.matrix.T @ (alphas * yhat), dtype=float).ravel()


def dual_objective(rep: KernelRep, yhat, alphas, C: float, family: Family) -> float:
    """KLR: 1/2 a'Qa + sum[a log a + (C-a) log(C-a)].  SVM: 1/2 a'Qa - sum a."""
    family = Family.parse(family)
    yhat = check_labels(np.asarray(yhat))
    alphas = np.asarray(alphas, dtype=float)
    w = _primal(rep, yhat, alphas)
    quad = 0.5 * float(w @ w)
    if family is Family.KLR:
        return quad + float(np.sum(xlogy(alphas, alphas) + xlogy(C - alphas, C - alphas)))
    if family is Family.SVM:
        return quad - float(alphas.sum())
    raise ValueError(f"No dual objective for family {family}")


# ---------------------------------------------------------------------------
# Dual coordinate descent
# ---------------------------------------------------------------------------

def _klr_step(a: float, b: float, q: float, C: float, lo_clamp: float, hi_clamp: float) -> float:
    """Minimizer over (0, C) of q/2 (z - a)^2 + b z + z log z + (C - z) log(C - z).

    Solved in t = log(z / (C - z)), where the stationarity condition
    q (z - a) + b + t = 0 is increasing in t with slope at least 1 and its
    root lies in [-b - q (C - a), -b + q a].
    """
    lo, hi = -b - q * (C - a), -b + q * a
    t = min(max(math.log(a) - math.log(C - a), lo), hi)
    for _ in range(100):
        f = q * (C * expit(t) - a) + b + t
        if abs(f) <= 1e-12:
            break
        if f > 0:
            hi = t
        else:
            lo = t
        t_new = t - f / (1.0 + q * C * expit(t) * expit(-t))
        if not lo <= t_new <= hi:
            t_new = 0.5 * (lo + hi)
        if t_new == t:
            break
        t = t_new
    return min(max(float(C * expit(t)), lo_clamp), hi_clamp)


def _validate_fit_inputs(rep: KernelRep, yhat, C: float, ensemble_fingerprint: Optional[str]) -> np.ndarray:
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    yhat = check_labels(np.asarray(yhat))
    if yhat.size != rep.n:
        raise ValueError(f"Got {yhat.size} labels for {rep.n} mapped rows")
    if rep.n == 0:
        raise ValueError("Cannot fit a surrogate on zero rows")
    if ensemble_fingerprint is not None and ensemble_fingerprint != rep.fingerprint:
        raise KernelMismatchError("Kernel representation was built from a different ensemble")
    return yhat


def _coordinate_descent(
    rep: KernelRep,
    yhat: np.ndarray,
    C: float,
    family: Family,
    tol: float,
    max_epochs: int,
    seed: int,
) -> SurrogateModel:
    Z = rep.matrix
    n = rep.n
    indptr, indices, data = Z.indptr, Z.indices, Z.data
    qdiag = rep.squared_norms()
    lo_clamp = float(np.nextafter(0.0, 1.0))
    hi_clamp = float(np.nextafter(C, 0.0))

    alphas = np.full(n, C / 2.0) if family is Family.KLR else np.zeros(n)
    w = _primal(rep, yhat, alphas)
    rng = np.random.default_rng(seed)

    converged = False
    epoch = 0
    violation = np.inf
    for epoch in range(1, max_epochs + 1):
        for i in rng.permutation(n):
            lo, hi = indptr[i], indptr[i + 1]
            cols, vals = indices[lo:hi], data[lo:hi]
            yi = yhat[i]
            b = yi * float(vals @ w[cols])
            a = alphas[i]
            q = qdiag[i]
            if family is Family.SVM:
                G = b - 1.0
                if q > 0:
                    new = min(max(a - G / q, 0.0), C)
                elif G < 0:
                    new = C
                elif G > 0:
                    new = 0.0
                else:
                    new = a
            else:
                new = _klr_step(a, b, q, C, lo_clamp, hi_clamp)
            delta = new - a
            if delta != 0.0:
                alphas[i] = new
                w[cols] += delta * yi * vals

        violation = _max_violation(rep, yhat, alphas, w, C, family, lo_clamp, hi_clamp)
        if epoch % 50 == 0:
            logger.debug("%s epoch %d: max projected gradient %.3e", family, epoch, violation)
        if violation <= tol:
            converged = True
            break

    if not converged:
        logger.warning(
            "%s solver hit the %d-epoch cap (max projected gradient %.3e > %.1e)",
            family, max_epochs, violation, tol,
        )
    # recompute to drop accumulated drift
    w = _primal(rep, yhat, alphas)
    return SurrogateModel(
        family=family, C=float(C), alphas=alphas, target_labels=yhat, train_rep=rep,
        primal_weights=w, epochs=epoch, converged=converged, seed=seed,
    )


def _max_violation(rep, yhat, alphas, w, C, family, lo_clamp, hi_clamp) -> float:
    Qa = yhat * np.asarray(rep.matrix @ w).ravel()
    if family is Family.SVM:
        G = Qa - 1.0
        pg = np.where(alphas <= 0.0, np.minimum(G, 0.0), np.where(alphas >= C, np.maximum(G, 0.0), G))
    else:
        G = Qa + np.log(alphas) - np.log(C - alphas)
        # the clamps act as the effective box for roots that underflow
        pg = np.where(alphas <= lo_clamp, np.minimum(G, 0.0),
                      np.where(alphas >= hi_clamp, np.maximum(G, 0.0), G))
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def fit_klr(
    rep: KernelRep,
    yhat,
    C: float,
    *,
    tol: float = DEFAULT_TOL,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    seed: int = 0,
    ensemble_fingerprint: Optional[str] = None,
) -> SurrogateModel:
    """Kernel logistic regression via its entropy-regularized dual."""
    yhat = _validate_fit_inputs(rep, yhat, C, ensemble_fingerprint)
    model = _coordinate_descent(rep, yhat, C, Family.KLR, tol, max_epochs, seed)
    logger.debug("KLR C=%g: %d epochs, objective %.8f", C, model.epochs, model.objective())
    return model


def fit_svm(
    rep: KernelRep,
    yhat,
    C: float,
    *,
    tol: float = DEFAULT_TOL,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    seed: int = 0,
    ensemble_fingerprint: Optional[str] = None,
) -> SurrogateModel:
    """L1-hinge SVM via its box-constrained dual."""
    yhat = _validate_fit_inputs(rep, yhat, C, ensemble_fingerprint)
    model = _coordinate_descent(rep, yhat, C, Family.SVM, tol, max_epochs, seed)
    logger.debug(
        "SVM C=%g: %d epochs, objective %.8f, %d support vectors",
        C, model.epochs, model.objective(), int(model.support_mask().sum()),
    )
    return model


def fit_surrogate(rep: KernelRep, yhat, C: float, family: Family, **kwargs) -> SurrogateModel:
    family = Family.parse(family)
    if family is Family.KLR:
        return fit_klr(rep, yhat, C, **kwargs)
    if family is Family.SVM:
        return fit_svm(rep, yhat, C, **kwargs)
    raise ValueError(f"{family} is not a representer surrogate")


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def similarities(rep: KernelRep, x_map: FeatureMap) -> np.ndarray:
    """k(x_i, x) for every row of `rep`."""
    check_compatible(rep.kind, rep.fingerprint, x_map.kind, x_map.fingerprint)
    return np.asarray(rep.matrix @ x_map.to_dense()).ravel()


def decision(model: SurrogateModel, x_map: FeatureMap) -> float:
    check_compatible(model.kind, model.fingerprint, x_map.kind, x_map.fingerprint)
    return float(x_map.values @ model.primal_weights[x_map.indices])


def decision_by_expansion(model: SurrogateModel, x_map: FeatureMap) -> float:
    """Decision value as the explicit sum of training contributions."""
    return float(model.contributions(x_map).sum())


def decisions(model: SurrogateModel, rep: KernelRep) -> np.ndarray:
    """Decision values for every row of `rep`."""
    check_compatible(model.kind, model.fingerprint, rep.kind, rep.fingerprint)
    return np.asarray(rep.matrix @ model.primal_weights).ravel()


def predict_proba(model: SurrogateModel, x_map: FeatureMap) -> float:
    return float(sigmoid(decision(model, x_map)))


def predict_proba_batch(model: SurrogateModel, rep: KernelRep) -> np.ndarray:
    return sigmoid(decisions(model, rep))


# ---------------------------------------------------------------------------
# Fidelity and tuning
# ---------------------------------------------------------------------------

def fidelity(model: SurrogateModel, ensemble: TreeEnsemble, eval_data: Dataset) -> FidelityReport:
    """Pearson correlation of surrogate and ensemble probabilities on `eval_data`."""
    if model.fingerprint != ensemble.fingerprint:
        raise KernelMismatchError("Surrogate was fit on a different ensemble")
    if eval_data.n < 2:
        raise ValueError(f"Fidelity needs at least 2 evaluation rows, got {eval_data.n}")
    rep = transform(ensemble, eval_data, model.kind)
    r = pearson(predict_proba_batch(model, rep), gbdt.predict_proba(ensemble, eval_data.features))
    return FidelityReport(pearson=r, n_eval=eval_data.n, family=model.family, kind=model.kind)


def tune_C(
    ensemble: TreeEnsemble,
    train: Dataset,
    family: Family,
    kind: KernelKind,
    grid: Optional[Sequence[float]] = None,
    *,
    seed: int = 0,
    validation_fraction: float = 0.1,
    tol: float = DEFAULT_TOL,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    observed_labels: bool = False,
) -> Tuple[float, FidelityReport, SurrogateModel]:
    """Choose C by validation fidelity, then refit on all of `train`.

    Returns (C, validation FidelityReport, model refit on `train`). Ties in
    correlation go to the smaller C; candidates with an undefined correlation
    are skipped. With `observed_labels` the surrogate fits `train.labels`
    instead of the ensemble's predicted labels; C is still chosen by fidelity
    to the ensemble.
    """
    family = Family.parse(family)
    kind = kind if isinstance(kind, KernelKind) else KernelKind.parse(kind)
    grid = default_C_grid() if grid is None else [float(c) for c in grid]
    if not grid:
        raise ValueError("C grid is empty")

    fit_part, valid = split(train, validation_fraction, seed)
    if valid.n < 2:
        raise ValueError(
            f"Validation split has {valid.n} row(s); need at least 2 (train has {train.n})"
        )
    rep_fit = transform(ensemble, fit_part, kind)
    rep_valid = transform(ensemble, valid, kind)
    yhat_fit = fit_part.labels if observed_labels else gbdt.predict_label(ensemble, fit_part.features)
    target = gbdt.predict_proba(ensemble, valid.features)

    best: Optional[Tuple[float, float]] = None
    for C in sorted(grid):
        model = fit_surrogate(rep_fit, yhat_fit, C, family, tol=tol, max_epochs=max_epochs, seed=seed)
        try:
            r = pearson(predict_proba_batch(model, rep_valid), target)
        except ValueError as e:
            logger.warning("%s C=%g skipped: %s", family, C, e)
            continue
        logger.info("%s/%s C=%g: validation pearson %.4f", family, kind, C, r)
        if best is None or r > best[1]:
            best = (C, r)

    if best is None:
        raise ValueError(f"No C in {grid} gave a defined validation correlation")
    C, r = best
    report = FidelityReport(pearson=r, n_eval=valid.n, family=family, kind=kind)
    yhat = train.labels if observed_labels else gbdt.predict_label(ensemble, train.features)
    model = fit_surrogate(transform(ensemble, train, kind), yhat, C, family,
                          tol=tol, max_epochs=max_epochs, seed=seed)
    logger.info("Selected %s C=%g (validation pearson %.4f)", family, C, r)
    return C, report, model
