import numpy as np
import pytest

from leafrep.config import config_from_dict
from leafrep.data import CENSUS_LABEL, CENSUS_POSITIVE, dataset_from_frame, make_census_like, make_separable
from leafrep.gbdt import GBDTConfig, TreeEnsemble, TreeNode, fit


@pytest.fixture
def two_tree_ensemble():
    """Hand-built ensemble over (x0, x1, x2); x = (1, 0, 0) reaches leaves 5 and 3.8."""
    tree1 = TreeNode.split(
        0, 1.0,
        TreeNode.leaf(0, -3.0),
        TreeNode.split(1, 1.0, TreeNode.leaf(1, 5.0), TreeNode.leaf(2, 1.2)),
    )
    tree2 = TreeNode.split(
        2, 1.0,
        TreeNode.split(0, 1.0, TreeNode.leaf(3, -1.5), TreeNode.leaf(4, 3.8)),
        TreeNode.leaf(5, -4.0),
    )
    return TreeEnsemble(trees=(tree1, tree2), base_score=0.0, config=GBDTConfig(num_trees=2), n_features=3)


@pytest.fixture(scope="session")
def separable():
    return make_separable(n=100, seed=0)


@pytest.fixture(scope="session")
def separable_ensemble(separable):
    return fit(separable, GBDTConfig(num_trees=20, max_depth=3))


@pytest.fixture(scope="session")
def census():
    return dataset_from_frame(make_census_like(n=400, seed=0), CENSUS_LABEL, CENSUS_POSITIVE)


@pytest.fixture
def tiny_config():
    """Small enough for end-to-end harness runs in a few seconds."""
    return config_from_dict({
        "seeds": [0],
        "kernel": "LeafOutput",
        "data": {"generated_rows": 300, "test_fraction": 0.2},
        "gbdt": {"num_trees": 10, "max_depth": 2},
        "surrogate": {"C_grid": [0.1, 1.0], "k_grid": [3, 5], "max_epochs": 300},
        "cleaning": {"flip_fraction": 0.4, "check_fractions": [0.0, 0.5, 1.0]},
        "roar": {"removal_fractions": [0.0, 0.2, 0.4], "n_queries": 10},
        "runtime": {"repetitions": 2},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
