import numpy as np
import pytest

from leafrep import gbdt
from leafrep.data import Dataset
from leafrep.gbdt import GBDTConfig, TreeEnsemble, TreeNode


# ---------------------------------------------------------------------------
# Hand-built ensemble
# ---------------------------------------------------------------------------

def test_two_tree_worked_example(two_tree_ensemble):
    x = np.array([1.0, 0.0, 0.0])
    assert gbdt.leaf_assignment(two_tree_ensemble, x).tolist() == [1, 4]
    assert gbdt.predict_margin(two_tree_ensemble, x) == pytest.approx(8.8)
    assert gbdt.predict_label(two_tree_ensemble, x) == 1
    assert gbdt.predict_proba(two_tree_ensemble, x) == pytest.approx(0.99985, abs=1e-5)
    assert gbdt.instance_loss(two_tree_ensemble, x, -1) == pytest.approx(8.80015, abs=1e-5)


def test_structure_accessors(two_tree_ensemble):
    assert two_tree_ensemble.num_trees == 2
    assert two_tree_ensemble.num_leaves == 6
    assert two_tree_ensemble.leaf_values.tolist() == [-3.0, 5.0, 1.2, -1.5, 3.8, -4.0]
    assert two_tree_ensemble.leaf_tree.tolist() == [0, 0, 0, 1, 1, 1]


def test_batch_prediction_matches_rows(two_tree_ensemble, rng):
    X = rng.uniform(-1.0, 2.0, size=(25, 3))
    batch = gbdt.predict_margin(two_tree_ensemble, X)
    rows = [gbdt.predict_margin(two_tree_ensemble, x) for x in X]
    assert np.allclose(batch, rows)


def test_dimension_mismatch(two_tree_ensemble):
    with pytest.raises(ValueError, match="Expected 3 features"):
        gbdt.predict_margin(two_tree_ensemble, np.zeros(2))
    with pytest.raises(ValueError):
        gbdt.leaf_assignment(two_tree_ensemble, np.zeros((4, 5)))


def test_invalid_label_in_loss(two_tree_ensemble):
    with pytest.raises(ValueError):
        gbdt.instance_loss(two_tree_ensemble, np.zeros(3), 0)


def test_routing_is_piecewise_constant(two_tree_ensemble):
    a = gbdt.leaf_assignment(two_tree_ensemble, np.array([1.0, 0.0, 0.0]))
    b = gbdt.leaf_assignment(two_tree_ensemble, np.array([1.7, 0.9, -3.0]))
    assert a.tolist() == b.tolist()


def test_leaf_ids_must_be_contiguous():
    tree = TreeNode.split(0, 0.5, TreeNode.leaf(0, 1.0), TreeNode.leaf(2, -1.0))
    with pytest.raises(ValueError, match="contiguous"):
        TreeEnsemble(trees=(tree,), base_score=0.0, config=GBDTConfig(num_trees=1), n_features=1)


def test_node_needs_two_children():
    with pytest.raises(ValueError, match="two children"):
        TreeNode(feature_index=0, threshold=1.0, left=TreeNode.leaf(0, 1.0))


def test_save_and_load(two_tree_ensemble, tmp_path):
    path = str(tmp_path / "ensemble.json")
    two_tree_ensemble.save(path)
    loaded = TreeEnsemble.load(path)
    assert loaded.fingerprint == two_tree_ensemble.fingerprint
    assert gbdt.predict_margin(loaded, np.array([1.0, 0.0, 0.0])) == pytest.approx(8.8)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"num_trees": 0},
    {"learning_rate": 0.0},
    {"learning_rate": 1.5},
    {"min_samples_leaf": 0},
    {"max_depth": -1},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GBDTConfig(**kwargs)


def test_unlimited_depth_is_capped():
    assert GBDTConfig(max_depth=None).depth_limit == gbdt.MAX_DEPTH_CAP
    assert GBDTConfig.from_dict(GBDTConfig(max_depth=None).to_dict()).max_depth is None


def test_default_grid():
    grid = gbdt.default_grid()
    assert len(grid) == 12
    assert {c.num_trees for c in grid} == {10, 100, 250}
    assert {c.max_depth for c in grid} == {3, 5, 10, None}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_fit_separable_reaches_full_training_accuracy(separable):
    ensemble = gbdt.fit(separable, GBDTConfig(num_trees=100, max_depth=3, learning_rate=0.3))
    assert ensemble.num_trees == 100
    assert gbdt.score(ensemble, separable) == 1.0


def test_depth_zero_single_leaf(separable):
    ensemble = gbdt.fit(separable, GBDTConfig(num_trees=1, max_depth=0))
    p = separable.positive_rate()
    assert ensemble.base_score == pytest.approx(np.log(p / (1 - p)))
    margins = gbdt.predict_margin(ensemble, separable.features)
    assert np.ptp(margins) == 0.0
    assert ensemble.num_leaves == 1


def test_fit_is_deterministic(census):
    config = GBDTConfig(num_trees=5, max_depth=3, seed=4)
    assert gbdt.fit(census, config).to_dict() == gbdt.fit(census, config).to_dict()


def test_training_loss_is_non_increasing(census):
    losses = []
    gbdt.fit(census, GBDTConfig(num_trees=30, max_depth=3, learning_rate=0.1),
             callback=lambda t, loss: losses.append(loss))
    assert len(losses) == 30
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_depth_and_leaf_size_limits(census):
    config = GBDTConfig(num_trees=5, max_depth=2, min_samples_leaf=15)
    ensemble = gbdt.fit(census, config)
    assert all(tree.depth() <= 2 for tree in ensemble.trees)
    counts = np.bincount(gbdt.leaf_assignment(ensemble, census.features).ravel(),
                         minlength=ensemble.num_leaves)
    assert counts.min() >= 15


def test_sum_decomposition(census, rng):
    ensemble = gbdt.fit(census, GBDTConfig(num_trees=8, max_depth=3))
    X = census.features[rng.choice(census.n, size=30, replace=False)]
    assigned = gbdt.leaf_assignment(ensemble, X)
    expected = ensemble.base_score + ensemble.leaf_values[assigned].sum(axis=1)
    assert np.allclose(gbdt.predict_margin(ensemble, X), expected)


def test_constant_features_give_stumps():
    data = Dataset(features=np.ones((6, 2)), labels=np.array([1, -1, 1, -1, 1, -1]),
                   feature_names=("a", "b"), row_ids=np.arange(6))
    ensemble = gbdt.fit(data, GBDTConfig(num_trees=3))
    assert all(tree.is_leaf for tree in ensemble.trees)


def test_fit_preconditions():
    single = Dataset(features=np.zeros((3, 1)), labels=np.ones(3, dtype=int),
                     feature_names=("a",), row_ids=np.arange(3))
    with pytest.raises(ValueError, match="single class"):
        gbdt.fit(single, GBDTConfig(num_trees=1))
    with pytest.raises(ValueError, match="at least 2"):
        gbdt.fit(single.subset([0]), GBDTConfig(num_trees=1))


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

def test_tune_singleton_grid(separable):
    config = GBDTConfig(num_trees=3, max_depth=1)
    assert gbdt.tune(separable, [config], folds=3) is config


def test_tune_empty_grid(separable):
    with pytest.raises(ValueError, match="empty"):
        gbdt.tune(separable, [], folds=3)


def test_tune_picks_best_cv_accuracy(separable):
    grid = [GBDTConfig(num_trees=2, max_depth=1), GBDTConfig(num_trees=10, max_depth=2),
            GBDTConfig(num_trees=20, max_depth=3)]
    chosen = gbdt.tune(separable, grid, folds=3, seed=1)
    scores = [gbdt.cross_val_accuracy(separable, c, 3, seed=1) for c in grid]
    assert gbdt.cross_val_accuracy(separable, chosen, 3, seed=1) == max(scores)


def test_tune_ties_prefer_fewer_trees_then_shallower():
    # every config scores 1.0 on a trivially split set
    x = np.repeat([[0.0], [1.0]], 10, axis=0)
    data = Dataset(features=x, labels=np.where(x[:, 0] > 0.5, 1, -1),
                   feature_names=("x",), row_ids=np.arange(20))
    grid = [GBDTConfig(num_trees=5, max_depth=None), GBDTConfig(num_trees=5, max_depth=2),
            GBDTConfig(num_trees=10, max_depth=1)]
    chosen = gbdt.tune(data, grid, folds=2)
    assert (chosen.num_trees, chosen.max_depth) == (5, 2)
