import numpy as np
import pandas as pd
import pytest

from leafrep.config import config_from_dict
from leafrep.data import flip_labels, split
from leafrep.explain import random_ordering
from leafrep.harness import (
    FLIP_STREAM,
    RANDOM_ORDER_STREAM,
    CaseStudyError,
    CurvePoint,
    load_dataset,
    run_case_study,
    run_cleaning,
    run_experiment,
    run_fidelity,
    run_roar,
    run_runtime,
)
from leafrep.utils import stream_seed


@pytest.fixture
def tiny_data(tiny_config):
    return load_dataset(tiny_config)


def test_curve_point_ignores_missing_values():
    point = CurvePoint.from_values("klr", 0.1, [1.0, 2.0, float("nan")])
    assert point.mean_y == 1.5
    assert point.stderr_y == pytest.approx(0.5)
    assert point.seed_count == 2
    assert np.isnan(CurvePoint.from_values("klr", 0.1, [float("nan")]).mean_y)


def test_fidelity_is_deterministic(tiny_config, tiny_data):
    tiny_config.methods = ["klr", "teknn"]
    first = run_fidelity(tiny_config, tiny_data)
    second = run_fidelity(tiny_config, tiny_data)
    pd.testing.assert_frame_equal(first.results, second.results)
    assert set(first.results["method"]) == {"klr", "teknn"}
    assert first.results["seed_count"].tolist() == [1, 1]
    assert first.results["mean_pearson"].between(-1, 1).all()
    assert set(first.tables["scatter"]["kernel"]) == {"LeafOutput"}


def test_cleaning_curve_anchors(tiny_config, tiny_data):
    tiny_config.experiment = "cleaning"
    tiny_config.methods = ["gbdt_loss", "random", "klr"]
    result = run_cleaning(tiny_config, tiny_data)
    reference = result.tables["reference"].set_index("model")["mean_accuracy"]
    for method, group in result.results.groupby("method"):
        by_x = group.set_index("x")
        assert by_x.loc[0.0, "mean_y"] == reference["corrupted"]
        assert by_x.loc[1.0, "mean_y"] == reference["clean"]
        assert by_x.loc[1.0, "mean_flips_found"] == 1.0
        assert by_x.loc[0.0, "mean_flips_found"] == 0.0


def test_random_ordering_recovers_flips_in_proportion(tiny_config, tiny_data):
    tiny_config.experiment = "cleaning"
    tiny_config.methods = ["random"]
    tiny_config.seeds = [0, 1, 2]
    tiny_config.cleaning.check_fractions = [0.0, 0.25, 0.5, 1.0]
    found = run_cleaning(tiny_config, tiny_data).results.set_index("x")["mean_flips_found"]
    assert found[0.25] == pytest.approx(0.25, abs=0.1)
    assert found[0.5] == pytest.approx(0.5, abs=0.1)


def test_random_ordering_is_independent_of_the_flips(tiny_data):
    train, _ = split(tiny_data, 0.2, 0)
    _, record = flip_labels(train, 0.4, stream_seed(0, FLIP_STREAM))
    ordering = random_ordering(train.n, stream_seed(0, RANDOM_ORDER_STREAM), train.row_ids)
    top = ordering.top(record.count)
    assert np.isin(top, record.flipped_row_ids).mean() < 0.6


def test_klr_ordering_finds_flips_ahead_of_random(tiny_config, tiny_data):
    tiny_config.experiment = "cleaning"
    tiny_config.methods = ["klr", "random"]
    tiny_config.cleaning.check_fractions = [0.0, 0.25, 0.5]
    found = run_cleaning(tiny_config, tiny_data).results.set_index(["method", "x"])["mean_flips_found"]
    assert found[("klr", 0.25)] > 0.35
    assert found[("klr", 0.25)] > found[("random", 0.25)]
    assert found[("klr", 0.5)] > found[("random", 0.5)]


def test_roar_without_removal_matches_baseline(tiny_config, tiny_data):
    tiny_config.experiment = "roar"
    tiny_config.methods = ["klr", "random", "teknn"]
    result = run_roar(tiny_config, tiny_data)
    baseline = result.tables["reference"].set_index("model").loc["baseline", "mean_accuracy"]
    start = result.results[result.results["x"] == 0.0]
    assert (start["mean_y"] == baseline).all()
    raw = result.raw[0]
    assert raw.columns.tolist() == ["seed", "method", "fraction", "removed", "accuracy"]
    assert raw.loc[raw["fraction"] == 0.4, "removed"].unique().tolist() == [96]


def test_runtime_keeps_clock_out_of_results(tiny_config, tiny_data):
    tiny_config.experiment = "runtime"
    tiny_config.methods = ["svm", "teknn"]
    result = run_runtime(tiny_config, tiny_data)
    assert result.results.columns.tolist() == [
        "seed", "method", "query_row_id", "param", "output", "top_row_id",
    ]
    timings = result.tables["timings"]
    assert timings["repetitions"].tolist() == [2, 2]
    assert (timings["train_mean_s"] > 0).all()


@pytest.fixture
def case_config():
    return config_from_dict({
        "experiment": "case_study",
        "seeds": [0],
        "data": {"generated_rows": 600},
        "gbdt": {"num_trees": 30, "max_depth": 3, "learning_rate": 0.3},
        "surrogate": {"C_grid": [0.1, 1.0], "max_epochs": 300},
        "case_study": {"keep": 40, "flip": 34, "top_k": 20},
    })


def test_case_study_blames_the_relabelled_subgroup(case_config):
    result = run_case_study(case_config)
    row = result.results.iloc[0]
    assert row["true_label"] == -1 and row["predicted_label"] == 1
    assert row["flipped"] == 34
    assert row["subgroup_share_contribution"] >= 0.5
    histograms = result.tables["histograms"]
    assert len(histograms) == 20
    assert histograms["positive_count"].sum() + histograms["negative_count"].sum() == \
        len(result.tables["explanation"])


def test_case_study_without_flips_has_nothing_to_explain(case_config):
    case_config.case_study.flip = 0
    with pytest.raises(CaseStudyError):
        run_case_study(case_config)


def test_run_experiment_validates_first(tiny_config, tiny_data):
    tiny_config.experiment = "roar"
    tiny_config.methods = ["surrogate_loss"]
    with pytest.raises(ValueError, match="not valid for roar"):
        run_experiment(tiny_config, tiny_data)
