"""Gradient-boosted decision trees for binary classification.

Trains an ensemble of binary-split regression trees on logistic-loss
gradients (Newton leaf values, exact greedy split search) and exposes the
per-tree leaf assignments and leaf values the tree kernels are built from.

Routing rule everywhere: go left when x[feature] < threshold, else right.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .utils import accuracy, check_labels, labels_from_margin, logistic_loss, sigmoid

logger = logging.getLogger(__name__)

# "Unlimited" depth is capped here.
MAX_DEPTH_CAP = 32

_MIN_GAIN = 1e-12


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GBDTConfig:
    """Boosting hyperparameters. `max_depth=None` means unlimited (capped at 32)."""
    num_trees: int = 100
    max_depth: Optional[int] = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    seed: int = 0
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError(f"num_trees must be >= 1, got {self.num_trees}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0 or None, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be >= 0, got {self.reg_lambda}")

    @property
    def depth_limit(self) -> int:
        if self.max_depth is None:
            return MAX_DEPTH_CAP
        return min(self.max_depth, MAX_DEPTH_CAP)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "GBDTConfig":
        depth = raw.get("max_depth", 3)
        return cls(
            num_trees=int(raw.get("num_trees", 100)),
            max_depth=None if depth is None else int(depth),
            learning_rate=float(raw.get("learning_rate", 0.1)),
            min_samples_leaf=int(raw.get("min_samples_leaf", 1)),
            seed=int(raw.get("seed", 0)),
            reg_lambda=float(raw.get("reg_lambda", 1.0)),
        )


def default_grid(learning_rate: float = 0.1, seed: int = 0) -> List[GBDTConfig]:
    """Trees {10, 100, 250} x depth {3, 5, 10, unlimited}."""
    return [
        GBDTConfig(num_trees=t, max_depth=d, learning_rate=learning_rate, seed=seed)
        for t in (10, 100, 250)
        for d in (3, 5, 10, None)
    ]


# ---------------------------------------------------------------------------
# Tree structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TreeNode:
    """Internal node (feature_index, threshold, left, right) or leaf (leaf_id, value)."""
    feature_index: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    leaf_id: int = -1
    value: float = 0.0

    def __post_init__(self):
        if (self.left is None) != (self.right is None):
            raise ValueError("An internal node needs exactly two children")
        if self.left is None and self.leaf_id < 0:
            raise ValueError("A leaf needs a non-negative leaf_id")
        if self.left is not None and self.feature_index < 0:
            raise ValueError("An internal node needs a non-negative feature_index")

    @classmethod
    def leaf(cls, leaf_id: int, value: float) -> "TreeNode":
        return cls(leaf_id=int(leaf_id), value=float(value))

    @classmethod
    def split(cls, feature_index: int, threshold: float, left: "TreeNode", right: "TreeNode") -> "TreeNode":
        return cls(feature_index=int(feature_index), threshold=float(threshold), left=left, right=right)

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def leaves(self) -> Iterator["TreeNode"]:
        """Leaves in left-to-right order."""
        if self.is_leaf:
            yield self
            return
        yield from self.left.leaves()
        yield from self.right.leaves()

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self) -> Dict[str, Any]:
        if self.is_leaf:
            return {"leaf_id": self.leaf_id, "value": self.value}
        return {
            "feature_index": self.feature_index,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "TreeNode":
        if "leaf_id" in raw:
            return cls.leaf(raw["leaf_id"], raw["value"])
        return cls.split(
            raw["feature_index"], raw["threshold"],
            cls.from_dict(raw["left"]), cls.from_dict(raw["right"]),
        )


@dataclass(frozen=True)
class _CompiledTree:
    """Preorder node arrays for vectorized routing; feature == -1 marks a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray


def _compile(root: TreeNode) -> _CompiledTree:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    leaf_id: List[int] = []

    def visit(node: TreeNode) -> int:
        pos = len(feature)
        feature.append(-1 if node.is_leaf else node.feature_index)
        threshold.append(node.threshold)
        left.append(-1)
        right.append(-1)
        leaf_id.append(node.leaf_id if node.is_leaf else -1)
        if not node.is_leaf:
            left[pos] = visit(node.left)
            right[pos] = visit(node.right)
        return pos

    visit(root)
    return _CompiledTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        leaf_id=np.asarray(leaf_id, dtype=np.int64),
    )


def _route(tree: _CompiledTree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int64)
    while True:
        rows = np.flatnonzero(tree.feature[node] >= 0)
        if rows.size == 0:
            return tree.leaf_id[node]
        at = node[rows]
        go_left = X[rows, tree.feature[at]] < tree.threshold[at]
        node[rows] = np.where(go_left, tree.left[at], tree.right[at])


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    """Trained trees whose summed leaf values plus base_score form the margin."""
    trees: Tuple[TreeNode, ...]
    base_score: float
    config: GBDTConfig
    n_features: int

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if not self.trees:
            raise ValueError("An ensemble needs at least one tree")
        ids = [leaf.leaf_id for tree in self.trees for leaf in tree.leaves()]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError("leaf_ids must be unique and contiguous from 0 across the ensemble")

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @cached_property
    def num_leaves(self) -> int:
        return sum(1 for tree in self.trees for _ in tree.leaves())

    @cached_property
    def leaf_values(self) -> np.ndarray:
        """Leaf value indexed by global leaf_id."""
        values = np.zeros(self.num_leaves)
        for tree in self.trees:
            for leaf in tree.leaves():
                values[leaf.leaf_id] = leaf.value
        values.flags.writeable = False
        return values

    @cached_property
    def leaf_tree(self) -> np.ndarray:
        """Tree index indexed by global leaf_id."""
        owner = np.zeros(self.num_leaves, dtype=np.int64)
        for t, tree in enumerate(self.trees):
            for leaf in tree.leaves():
                owner[leaf.leaf_id] = t
        owner.flags.writeable = False
        return owner

    @cached_property
    def _compiled(self) -> Tuple[_CompiledTree, ...]:
        return tuple(_compile(tree) for tree in self.trees)

    @cached_property
    def fingerprint(self) -> str:
        """Content hash of the serialized ensemble."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    # ------------------------------------------------------------------ #
    # Serialization
    # ------------------------------------------------------------------ #

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base_score": self.base_score,
            "n_features": self.n_features,
            "config": self.config.to_dict(),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "TreeEnsemble":
        return cls(
            trees=tuple(TreeNode.from_dict(t) for t in raw["trees"]),
            base_score=float(raw["base_score"]),
            config=GBDTConfig.from_dict(raw.get("config", {})),
            n_features=int(raw["n_features"]),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "TreeEnsemble":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _TreeGrower:
    """Grows one regression tree on gradients g and hessians h."""

    def __init__(self, X: np.ndarray, g: np.ndarray, h: np.ndarray, config: GBDTConfig, first_leaf_id: int):
        self.X = X
        self.g = g
        self.h = h
        self.config = config
        self.next_leaf_id = first_leaf_id
        self.row_values = np.zeros(X.shape[0])

    def grow(self) -> TreeNode:
        return self._grow(np.arange(self.X.shape[0]), 0)

    def _grow(self, idx: np.ndarray, depth: int) -> TreeNode:
        G = float(self.g[idx].sum())
        H = float(self.h[idx].sum())
        found = None
        if depth < self.config.depth_limit and idx.size >= 2 * self.config.min_samples_leaf:
            found = self._best_split(idx, G, H)
        if found is None:
            value = -self.config.learning_rate * G / (H + self.config.reg_lambda)
            leaf = TreeNode.leaf(self.next_leaf_id, value)
            self.next_leaf_id += 1
            self.row_values[idx] = value
            return leaf

        feature, threshold = found
        go_left = self.X[idx, feature] < threshold
        left = self._grow(idx[go_left], depth + 1)
        right = self._grow(idx[~go_left], depth + 1)
        return TreeNode.split(feature, threshold, left, right)

    def _best_split(self, idx: np.ndarray, G: float, H: float) -> Optional[Tuple[int, float]]:
        lam = self.config.reg_lambda
        m = self.config.min_samples_leaf
        n = idx.size
        parent = G * G / (H + lam)
        counts = np.arange(1, n)
        size_ok = (counts >= m) & (n - counts >= m)

        best_gain = _MIN_GAIN
        best: Optional[Tuple[int, float]] = None
        for j in range(self.X.shape[1]):
            xj = self.X[idx, j]
            order = np.argsort(xj, kind="stable")
            xs = xj[order]
            valid = size_ok & (xs[:-1] < xs[1:])
            if not valid.any():
                continue
            GL = np.cumsum(self.g[idx][order])[:-1]
            HL = np.cumsum(self.h[idx][order])[:-1]
            gain = 0.5 * (GL * GL / (HL + lam) + (G - GL) ** 2 / (H - HL + lam) - parent)
            gain = np.where(valid, gain, -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > best_gain:
                best_gain = float(gain[k])
                best = (j, float(xs[k + 1]))
        return best


def fit(
    train: Dataset,
    config: GBDTConfig,
    callback: Optional[Callable[[int, float], None]] = None,
) -> TreeEnsemble:
    """Boost `config.num_trees` trees on the logistic loss.

    `callback(iteration, mean_train_loss)` is called after every tree.
    """
    if train.n < 2:
        raise ValueError(f"Need at least 2 training rows, got {train.n}")
    n_pos = int(np.sum(train.labels == 1))
    if n_pos == 0 or n_pos == train.n:
        raise ValueError("Training data contains a single class")

    X = train.features
    y01 = (train.labels + 1) / 2.0
    p = n_pos / train.n
    base_score = float(np.log(p / (1.0 - p)))
    margin = np.full(train.n, base_score)

    trees: List[TreeNode] = []
    next_leaf_id = 0
    for t in range(1, config.num_trees + 1):
        prob = sigmoid(margin)
        grower = _TreeGrower(X, prob - y01, prob * (1.0 - prob), config, next_leaf_id)
        trees.append(grower.grow())
        next_leaf_id = grower.next_leaf_id
        margin = margin + grower.row_values
        loss = float(np.mean(logistic_loss(margin, train.labels)))
        if callback is not None:
            callback(t, loss)
        if t % 25 == 0 or t == config.num_trees:
            logger.debug("Tree %d/%d: train loss %.6f, %d leaves", t, config.num_trees, loss, next_leaf_id)

    return TreeEnsemble(trees=tuple(trees), base_score=base_score, config=config, n_features=train.d)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _as_matrix(ensemble: TreeEnsemble, x) -> Tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != ensemble.n_features:
        raise ValueError(
            f"Expected {ensemble.n_features} features, got shape {np.asarray(x).shape}"
        )
    return X, single


def leaf_assignment(ensemble: TreeEnsemble, x) -> np.ndarray:
    """Global leaf_id reached in every tree: shape (M,) for one row, (n, M) for a matrix."""
    X, single = _as_matrix(ensemble, x)
    out = np.empty((X.shape[0], ensemble.num_trees), dtype=np.int64)
    for t, tree in enumerate(ensemble._compiled):
        out[:, t] = _route(tree, X)
    return out[0] if single else out


def predict_margin(ensemble: TreeEnsemble, x):
    """base_score + the sum of the assigned leaf values."""
    assigned = leaf_assignment(ensemble, x)
    margin = ensemble.base_score + ensemble.leaf_values[assigned].sum(axis=-1)
    return float(margin) if assigned.ndim == 1 else margin


def predict_label(ensemble: TreeEnsemble, x):
    margin = predict_margin(ensemble, x)
    labels = labels_from_margin(margin)
    return int(labels) if np.ndim(margin) == 0 else labels


def predict_proba(ensemble: TreeEnsemble, x):
    """Probability of the positive class, sigmoid(margin)."""
    margin = predict_margin(ensemble, x)
    proba = sigmoid(margin)
    return float(proba) if np.ndim(margin) == 0 else proba


def instance_loss(ensemble: TreeEnsemble, x, y):
    """Logistic loss log(1 + exp(-y * margin))."""
    margin = predict_margin(ensemble, x)
    y_arr = check_labels(np.atleast_1d(y))
    loss = logistic_loss(margin, y_arr if np.ndim(margin) else y_arr[0])
    return float(loss) if np.ndim(margin) == 0 else loss


def score(ensemble: TreeEnsemble, data: Dataset) -> float:
    """Accuracy of the ensemble on a dataset."""
    return accuracy(data.labels, predict_label(ensemble, data.features))


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

def _stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    for cls in (-1, 1):
        members = rng.permutation(np.flatnonzero(labels == cls))
        fold_of[members] = np.arange(members.size) % folds
    return fold_of


def cross_val_accuracy(train: Dataset, config: GBDTConfig, folds: int, seed: int = 0) -> float:
    """Mean held-out accuracy over stratified folds."""
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    fold_of = _stratified_folds(train.labels, folds, seed)
    scores = []
    for k in range(folds):
        held = fold_of == k
        part_train = train.subset(np.flatnonzero(~held))
        part_valid = train.subset(np.flatnonzero(held))
        for part, name in ((part_train, "training"), (part_valid, "validation")):
            if np.unique(part.labels).size < 2:
                raise ValueError(f"Fold {k} {name} part does not contain both classes")
        scores.append(score(fit(part_train, config), part_valid))
    return float(np.mean(scores))


def _complexity(config: GBDTConfig) -> Tuple[int, int]:
    return config.num_trees, config.depth_limit + (1 if config.max_depth is None else 0)


def tune(train: Dataset, grid: Sequence[GBDTConfig], folds: int = 5, seed: int = 0) -> GBDTConfig:
    """Grid config with the best mean CV accuracy; ties go to fewer trees, then shallower."""
    if not grid:
        raise ValueError("Tuning grid is empty")
    if len(grid) == 1:
        return grid[0]
    results = []
    for config in grid:
        acc = cross_val_accuracy(train, config, folds, seed)
        logger.info(
            "CV trees=%d depth=%s: accuracy %.4f",
            config.num_trees, config.max_depth, acc,
        )
        results.append((acc, config))
    best_acc, best = min(results, key=lambda r: (-r[0],) + _complexity(r[1]))
    logger.info("Selected trees=%d depth=%s (CV accuracy %.4f)", best.num_trees, best.max_depth, best_acc)
    return best
