"""Tree-ensemble feature maps and kernels.

Three encodings of how an ensemble processes a row:

    LeafPath    one-hot over global leaf ids, 1 for each leaf reached
    LeafOutput  same support as LeafPath, carrying the leaf value instead of 1
    TreeOutput  dense length-M vector of the leaf value reached in each tree

The kernel of two rows is the dot product of their maps. Maps are never
normalized, so dot(phi(x), ones) + base_score reproduces the ensemble margin
for LeafOutput and TreeOutput.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np
from scipy import sparse

from . import gbdt
from .data import Dataset
from .gbdt import TreeEnsemble

logger = logging.getLogger(__name__)

DEFAULT_GRAM_CAP = 20_000


class KernelMismatchError(ValueError):
    """A map or representation was used with the wrong ensemble or kernel kind."""


class KernelKind(str, Enum):
    LEAF_PATH = "LeafPath"
    TREE_OUTPUT = "TreeOutput"
    LEAF_OUTPUT = "LeafOutput"

    @classmethod
    def parse(cls, name: str) -> "KernelKind":
        """Case-insensitive lookup by value ("leafpath", "LeafOutput", ...)."""
        wanted = str(name).strip().lower().replace("_", "").replace("-", "")
        for kind in cls:
            if kind.value.lower() == wanted:
                return kind
        choices = ", ".join(k.value for k in cls)
        raise ValueError(f"Unknown kernel kind {name!r}; expected one of {choices}")

    def __str__(self) -> str:
        return self.value


def dimension_for(ensemble: TreeEnsemble, kind: KernelKind) -> int:
    return ensemble.num_trees if kind is KernelKind.TREE_OUTPUT else ensemble.num_leaves


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Sparse map of one row, entries sorted by index."""
    kind: KernelKind
    dimension: int
    indices: np.ndarray
    values: np.ndarray
    fingerprint: str

    def dot(self, other: "FeatureMap") -> float:
        check_compatible(self.kind, self.fingerprint, other.kind, other.fingerprint)
        common, ia, ib = np.intersect1d(self.indices, other.indices, assume_unique=True, return_indices=True)
        if common.size == 0:
            return 0.0
        return float(np.dot(self.values[ia], other.values[ib]))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.values
        return out

    def to_sparse(self) -> sparse.csr_matrix:
        """1 x dimension CSR row."""
        indptr = np.array([0, self.indices.size])
        return sparse.csr_matrix((self.values, self.indices, indptr), shape=(1, self.dimension))


def check_compatible(kind_a: KernelKind, fp_a: str, kind_b: KernelKind, fp_b: str) -> None:
    if kind_a is not kind_b:
        raise KernelMismatchError(f"Kernel kind mismatch: {kind_a} vs {kind_b}")
    if fp_a != fp_b:
        raise KernelMismatchError(
            f"Ensemble fingerprint mismatch: {fp_a[:12]}... vs {fp_b[:12]}..."
        )


def map_rows(ensemble: TreeEnsemble, X: np.ndarray, kind: KernelKind) -> sparse.csr_matrix:
    """Feature maps of every row of `X` as an (n, dimension) CSR matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    M = ensemble.num_trees
    dim = dimension_for(ensemble, kind)
    if n == 0:
        return sparse.csr_matrix((0, dim))
    assigned = gbdt.leaf_assignment(ensemble, X)  # (n, M)
    values = ensemble.leaf_values[assigned]
    indptr = np.arange(0, n * M + 1, M)
    if kind is KernelKind.TREE_OUTPUT:
        indices = np.tile(np.arange(M), n)
        data = values.ravel()
    else:
        # leaf ids of later trees are larger, so rows are already index-sorted
        indices = assigned.ravel()
        data = np.ones(n * M) if kind is KernelKind.LEAF_PATH else values.ravel()
    return sparse.csr_matrix((data.astype(float), indices, indptr), shape=(n, dim))


def feature_map(ensemble: TreeEnsemble, x, kind: KernelKind) -> FeatureMap:
    """Map of a single row."""
    kind = KernelKind.parse(kind) if not isinstance(kind, KernelKind) else kind
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"feature_map expects one row, got shape {x.shape}")
    row = map_rows(ensemble, x[None, :], kind)
    return FeatureMap(
        kind=kind,
        dimension=row.shape[1],
        indices=row.indices.copy(),
        values=row.data.copy(),
        fingerprint=ensemble.fingerprint,
    )


def kernel(ensemble: TreeEnsemble, xa, xb, kind: KernelKind) -> float:
    """k(xa, xb) = phi(xa) . phi(xb)."""
    return feature_map(ensemble, xa, kind).dot(feature_map(ensemble, xb, kind))


@dataclass(frozen=True, eq=False)
class KernelRep:
    """Feature maps of a whole dataset as one CSR matrix bound to an ensemble."""
    kind: KernelKind
    dimension: int
    fingerprint: str
    matrix: sparse.csr_matrix
    row_ids: np.ndarray

    def __post_init__(self):
        if self.matrix.shape[1] != self.dimension:
            raise ValueError(
                f"Matrix has {self.matrix.shape[1]} columns, expected dimension {self.dimension}"
            )
        if self.row_ids.shape != (self.matrix.shape[0],):
            raise ValueError("row_ids must have one entry per mapped row")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def __len__(self) -> int:
        return self.n

    def map_at(self, i: int) -> FeatureMap:
        row = self.matrix.getrow(i)
        return FeatureMap(self.kind, self.dimension, row.indices.copy(), row.data.copy(), self.fingerprint)

    @property
    def maps(self) -> List[FeatureMap]:
        return [self.map_at(i) for i in range(self.n)]

    def subset(self, positions) -> "KernelRep":
        positions = np.asarray(positions, dtype=np.int64)
        return KernelRep(self.kind, self.dimension, self.fingerprint,
                         self.matrix[positions], self.row_ids[positions])

    def squared_norms(self) -> np.ndarray:
        return np.asarray(self.matrix.multiply(self.matrix).sum(axis=1)).ravel()

    def cross(self, other: "KernelRep") -> np.ndarray:
        """Dense kernel block k(self_i, other_j)."""
        check_compatible(self.kind, self.fingerprint, other.kind, other.fingerprint)
        return np.asarray((self.matrix @ other.matrix.T).todense())

    def gram(self, cap: int = DEFAULT_GRAM_CAP) -> np.ndarray:
        """Explicit n x n Gram matrix; refuses above `cap` rows."""
        if self.n > cap:
            raise ValueError(f"Refusing to materialize a {self.n} x {self.n} Gram matrix (cap {cap})")
        return self.cross(self)

    def save(self, path: str) -> None:
        np.savez_compressed(
            path,
            data=self.matrix.data,
            indices=self.matrix.indices,
            indptr=self.matrix.indptr,
            shape=np.asarray(self.matrix.shape),
            row_ids=self.row_ids,
            kind=np.asarray(self.kind.value),
            fingerprint=np.asarray(self.fingerprint),
        )

    @classmethod
    def load(cls, path: str, expected_fingerprint: Optional[str] = None) -> "KernelRep":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Kernel cache not found: {path}")
        with np.load(path, allow_pickle=False) as f:
            shape = tuple(int(s) for s in f["shape"])
            matrix = sparse.csr_matrix((f["data"], f["indices"], f["indptr"]), shape=shape)
            rep = cls(
                kind=KernelKind.parse(str(f["kind"])),
                dimension=shape[1],
                fingerprint=str(f["fingerprint"]),
                matrix=matrix,
                row_ids=f["row_ids"].astype(np.int64),
            )
        if expected_fingerprint is not None and rep.fingerprint != expected_fingerprint:
            raise KernelMismatchError(f"Cached kernel {path} belongs to a different ensemble")
        return rep


def transform(ensemble: TreeEnsemble, data: Dataset, kind: KernelKind) -> KernelRep:
    """Feature maps of every row of `data`."""
    kind = KernelKind.parse(kind) if not isinstance(kind, KernelKind) else kind
    if data.d != ensemble.n_features:
        raise ValueError(f"Dataset has {data.d} features, ensemble expects {ensemble.n_features}")
    matrix = map_rows(ensemble, data.features, kind)
    logger.debug("Mapped %d rows to %s space (dimension %d)", data.n, kind, matrix.shape[1])
    return KernelRep(
        kind=kind,
        dimension=matrix.shape[1],
        fingerprint=ensemble.fingerprint,
        matrix=matrix,
        row_ids=np.asarray(data.row_ids, dtype=np.int64).copy(),
    )
