"""Experiment protocols for leafrep.

Each runner takes a validated ExperimentConfig and returns an
ExperimentResult; `run_experiment` dispatches on `config.experiment`.

    fidelity    surrogate vs ensemble probability correlation on test data
    cleaning    fix flipped labels in ordering order, retrain, track accuracy
    roar        remove the most supportive rows, retrain, track accuracy
    runtime     wall-clock cost of setting up and explaining per method
    case_study  explain a misclassified row after a subgroup domain mismatch

Everything written to results.csv is a deterministic function of the config
and the seeds.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import explain, gbdt
from .config import ExperimentConfig
from .data import CENSUS_LABEL, CENSUS_POSITIVE, Dataset, dataset_from_frame, flip_labels, \
    inject_domain_mismatch, load_csv, make_census_like, split
from .explain import Ordering
from .gbdt import GBDTConfig, TreeEnsemble
from .report import ExperimentResult
from .surrogate import Family, SurrogateModel, fidelity, predict_proba_batch, tune_C
from .tree_kernel import KernelKind, transform
from .utils import standard_error, stream_seed, top_count

logger = logging.getLogger(__name__)

# Per-repetition seed streams; splits and surrogate tuning use the seed itself.
FLIP_STREAM = 1
RANDOM_ORDER_STREAM = 2


class CaseStudyError(ValueError):
    """No misclassified subgroup test row exists to explain."""


@dataclass(frozen=True)
class CurvePoint:
    x: float
    mean_y: float
    stderr_y: float
    method: str
    seed_count: int

    @classmethod
    def from_values(cls, method: str, x: float, values) -> "CurvePoint":
        """Aggregate per-seed values, ignoring missing (NaN) entries."""
        v = np.asarray(values, dtype=float)
        v = v[~np.isnan(v)]
        if v.size == 0:
            return cls(x=float(x), mean_y=float("nan"), stderr_y=float("nan"), method=method, seed_count=0)
        return cls(x=float(x), mean_y=float(v.mean()), stderr_y=standard_error(v),
                   method=method, seed_count=int(v.size))


def _banner(title: str) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def load_dataset(config: ExperimentConfig) -> Dataset:
    """The configured CSV, or the generated income table when no path is set."""
    d = config.data
    if d.path:
        return load_csv(d.path, d.label_column, d.positive_value, d.categorical_columns)
    frame = make_census_like(n=d.generated_rows, seed=config.master_seed)
    logger.info("Using generated income table (%d rows, seed %d)", d.generated_rows, config.master_seed)
    return dataset_from_frame(frame, CENSUS_LABEL, CENSUS_POSITIVE)


def _ensemble_config(config: ExperimentConfig, train: Dataset, seed: int) -> GBDTConfig:
    if config.gbdt.tune:
        return gbdt.tune(train, config.gbdt.grid(seed), config.gbdt.folds, seed)
    return config.gbdt.to_config(seed)


class _RetrainCache:
    """Ensembles keyed by training content; fit is deterministic so reuse is exact."""

    def __init__(self, config: GBDTConfig, test: Dataset):
        self.config = config
        self.test = test
        self._accuracy: Dict[str, float] = {}

    def accuracy(self, train: Dataset) -> float:
        h = hashlib.sha1()
        h.update(train.row_ids.tobytes())
        h.update(train.labels.tobytes())
        key = h.hexdigest()
        if key not in self._accuracy:
            self._accuracy[key] = gbdt.score(gbdt.fit(train, self.config), self.test)
        return self._accuracy[key]


def _surrogate(method: str, ensemble: TreeEnsemble, train: Dataset, kind: KernelKind,
               config: ExperimentConfig, seed: int, observed_labels: bool = False) -> SurrogateModel:
    s = config.surrogate
    _, _, model = tune_C(
        ensemble, train, Family.parse(method), kind, s.C_grid, seed=seed,
        validation_fraction=s.validation_fraction, tol=s.tol, max_epochs=s.max_epochs,
        observed_labels=observed_labels,
    )
    return model


def _random_ordering(train: Dataset, seed: int) -> Ordering:
    return explain.random_ordering(train.n, stream_seed(seed, RANDOM_ORDER_STREAM), train.row_ids)


def _teknn(ensemble: TreeEnsemble, train: Dataset, kind: KernelKind,
           config: ExperimentConfig, seed: int) -> explain.TEKNNModel:
    _, _, model = explain.tune_teknn(
        ensemble, train, kind, config.surrogate.k_grid, seed=seed,
        validation_fraction=config.surrogate.validation_fraction,
    )
    return model


def _curves(raw: pd.DataFrame, x_col: str, y_col: str) -> List[CurvePoint]:
    points = []
    for (method, x), group in raw.groupby(["method", x_col], sort=True):
        points.append(CurvePoint.from_values(method, x, group[y_col]))
    return points


def _reference_table(rows: List[Dict[str, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    out = []
    for model, group in frame.groupby("model", sort=True):
        out.append({
            "model": model,
            "mean_accuracy": float(group["accuracy"].mean()),
            "stderr_accuracy": standard_error(group["accuracy"]),
            "seed_count": int(group.shape[0]),
        })
    return pd.DataFrame(out)


# ---------------------------------------------------------------------------
# Fidelity
# ---------------------------------------------------------------------------

def run_fidelity(config: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentResult:
    """Tune each surrogate per kernel kind and correlate it with the ensemble on test data."""
    data = load_dataset(config) if data is None else data
    methods = config.resolved_methods()
    kinds = config.kernel_kinds()
    seeds = config.resolved_seeds()

    raw: Dict[int, pd.DataFrame] = {}
    scatter = []
    fingerprints = {}
    for seed in seeds:
        _banner(f"FIDELITY seed {seed}")
        train, test = split(data, config.data.test_fraction, seed)
        ensemble = gbdt.fit(train, _ensemble_config(config, train, seed))
        fingerprints[f"seed_{seed}"] = ensemble.fingerprint
        target = gbdt.predict_proba(ensemble, test.features)
        rows = []
        for kind in kinds:
            for method in methods:
                if method == "teknn":
                    model = _teknn(ensemble, train, kind, config, seed)
                    report = explain.teknn_fidelity(model, ensemble, test)
                    proba = explain.teknn_predict_proba(model, transform(ensemble, test, kind))
                    param = float(model.k)
                else:
                    model = _surrogate(method, ensemble, train, kind, config, seed)
                    report = fidelity(model, ensemble, test)
                    proba = predict_proba_batch(model, transform(ensemble, test, kind))
                    param = model.C
                logger.info("%s / %s: test pearson %.4f", method, kind, report.pearson)
                rows.append({"seed": seed, "method": method, "kernel": kind.value,
                             "param": param, "pearson": report.pearson, "n_eval": report.n_eval})
                scatter.append(pd.DataFrame({
                    "seed": seed, "method": method, "kernel": kind.value,
                    "row_id": test.row_ids, "ensemble_proba": target, "surrogate_proba": proba,
                }))
        raw[seed] = pd.DataFrame(rows)

    all_rows = pd.concat(raw.values(), ignore_index=True)
    results = []
    for (method, kernel), group in all_rows.groupby(["method", "kernel"], sort=True):
        results.append({
            "method": method,
            "kernel": kernel,
            "mean_pearson": float(group["pearson"].mean()),
            "stderr_pearson": standard_error(group["pearson"]),
            "seed_count": int(group.shape[0]),
        })
    return ExperimentResult(
        experiment="fidelity",
        results=pd.DataFrame(results),
        raw=raw,
        tables={"scatter": pd.concat(scatter, ignore_index=True)},
        fingerprints=fingerprints,
        seeds=seeds,
    )


# ---------------------------------------------------------------------------
# Dataset cleaning
# ---------------------------------------------------------------------------

def _cleaning_orderings(methods: List[str], ensemble: TreeEnsemble, corrupted: Dataset,
                        kind: KernelKind, config: ExperimentConfig, seed: int) -> Dict[str, Ordering]:
    """One ordering per method over the corrupted training rows.

    The |alpha| orderings use surrogates fit to `cleaning.surrogate_labels`;
    the surrogate-loss ordering always scores the KLR fit to the ensemble's labels.
    """
    models: Dict[Tuple[str, bool], SurrogateModel] = {}
    observed = config.cleaning.surrogate_labels == "observed"

    def surrogate(method: str, observed_labels: bool) -> SurrogateModel:
        key = (method, observed_labels)
        if key not in models:
            models[key] = _surrogate(method, ensemble, corrupted, kind, config, seed, observed_labels)
        return models[key]

    orderings = {}
    for method in methods:
        if method in ("klr", "svm"):
            orderings[method] = explain.global_importance(surrogate(method, observed))
        elif method == "surrogate_loss":
            orderings[method] = explain.surrogate_loss_ordering(surrogate("klr", False), corrupted)
        elif method == "gbdt_loss":
            orderings[method] = explain.gbdt_loss_ordering(ensemble, corrupted)
        elif method == "random":
            orderings[method] = _random_ordering(corrupted, seed)
        elif method == "teknn":
            orderings[method] = explain.teknn_density_ordering(_teknn(ensemble, corrupted, kind, config, seed))
        else:
            raise ValueError(f"Unknown cleaning method {method!r}")
    return orderings


def run_cleaning(config: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentResult:
    """Check the top of each ordering, restore flipped labels found there, retrain."""
    data = load_dataset(config) if data is None else data
    methods = config.resolved_methods()
    kind = config.kernel_kinds()[0]
    seeds = config.resolved_seeds()
    fractions = config.cleaning.check_fractions

    raw: Dict[int, pd.DataFrame] = {}
    reference = []
    fingerprints = {}
    for seed in seeds:
        _banner(f"CLEANING seed {seed}")
        train, test = split(data, config.data.test_fraction, seed)
        corrupted, record = flip_labels(train, config.cleaning.flip_fraction, stream_seed(seed, FLIP_STREAM))
        gbdt_config = _ensemble_config(config, corrupted, seed)
        cache = _RetrainCache(gbdt_config, test)
        ensemble = gbdt.fit(corrupted, gbdt_config)
        fingerprints[f"seed_{seed}"] = ensemble.fingerprint
        reference.append({"model": "clean", "accuracy": cache.accuracy(train), "seed": seed})
        reference.append({"model": "corrupted", "accuracy": cache.accuracy(corrupted), "seed": seed})
        logger.info("Flipped %d labels; clean acc %.4f, corrupted acc %.4f",
                    record.count, reference[-2]["accuracy"], reference[-1]["accuracy"])

        orderings = _cleaning_orderings(methods, ensemble, corrupted, kind, config, seed)
        flipped = set(int(r) for r in record.flipped_row_ids)
        pos_of = {int(r): i for i, r in enumerate(corrupted.row_ids)}
        rows = []
        for method, ordering in orderings.items():
            for f in fractions:
                checked = ordering.top(top_count(f, corrupted.n))
                found = [pos_of[int(r)] for r in checked if int(r) in flipped]
                labels = corrupted.labels.copy()
                labels[found] = train.labels[found]
                acc = cache.accuracy(corrupted.with_labels(labels))
                rows.append({
                    "seed": seed, "method": method, "fraction": f, "accuracy": acc,
                    "flips_found": len(found) / record.count if record.count else 0.0,
                })
            logger.info("%s: accuracy at %.2f checked = %.4f", method, fractions[-1], rows[-1]["accuracy"])
        raw[seed] = pd.DataFrame(rows)

    all_rows = pd.concat(raw.values(), ignore_index=True)
    found = all_rows.groupby(["method", "fraction"], sort=True)["flips_found"].mean()
    results = pd.DataFrame([asdict(p) for p in _curves(all_rows, "fraction", "accuracy")])
    results["mean_flips_found"] = [found[(m, x)] for m, x in zip(results["method"], results["x"])]
    return ExperimentResult(
        experiment="cleaning",
        results=results,
        raw=raw,
        tables={"reference": _reference_table(reference)},
        fingerprints=fingerprints,
        seeds=seeds,
    )


# ---------------------------------------------------------------------------
# Remove and retrain
# ---------------------------------------------------------------------------

def _query_rows(test: Dataset, count: int, seed: int) -> np.ndarray:
    count = min(count, test.n)
    return np.sort(np.random.default_rng(seed).permutation(test.n)[:count])


def run_roar(config: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentResult:
    """Remove the rows most supportive of test predictions and measure the accuracy drop."""
    data = load_dataset(config) if data is None else data
    methods = config.resolved_methods()
    kind = config.kernel_kinds()[0]
    seeds = config.resolved_seeds()
    fractions = config.roar.removal_fractions

    raw: Dict[int, pd.DataFrame] = {}
    reference = []
    fingerprints = {}
    for seed in seeds:
        _banner(f"ROAR seed {seed}")
        train, test = split(data, config.data.test_fraction, seed)
        gbdt_config = _ensemble_config(config, train, seed)
        ensemble = gbdt.fit(train, gbdt_config)
        fingerprints[f"seed_{seed}"] = ensemble.fingerprint
        baseline = gbdt.score(ensemble, test)
        reference.append({"model": "baseline", "accuracy": baseline, "seed": seed})
        queries = test.features[_query_rows(test, config.roar.n_queries, seed)]

        rows = []
        accuracies: Dict[bytes, float] = {}
        for method in methods:
            if method in ("klr", "svm"):
                model = _surrogate(method, ensemble, train, kind, config, seed)
                ordering = explain.aggregate_explanations(model, ensemble, queries)
            elif method == "teknn":
                ordering = explain.teknn_aggregate(_teknn(ensemble, train, kind, config, seed), ensemble, queries)
            elif method == "random":
                ordering = _random_ordering(train, seed)
            else:
                raise ValueError(f"Unknown ROAR method {method!r}")

            for p in fractions:
                removed = ordering.top(top_count(p, train.n))
                keep = np.flatnonzero(~np.isin(train.row_ids, removed))
                key = keep.tobytes()
                if key not in accuracies:
                    remaining = train.subset(keep)
                    if remaining.n < 2 or np.unique(remaining.labels).size < 2:
                        logger.warning("%s: removing %.0f%% leaves a single class; point skipped",
                                       method, 100 * p)
                        accuracies[key] = float("nan")
                    else:
                        accuracies[key] = gbdt.score(gbdt.fit(remaining, gbdt_config), test)
                rows.append({"seed": seed, "method": method, "fraction": p,
                             "removed": int(removed.size), "accuracy": accuracies[key]})
            logger.info("%s: accuracy after removing %.0f%% = %.4f",
                        method, 100 * fractions[-1], rows[-1]["accuracy"])
        raw[seed] = pd.DataFrame(rows)

    all_rows = pd.concat(raw.values(), ignore_index=True)
    return ExperimentResult(
        experiment="roar",
        results=pd.DataFrame([asdict(p) for p in _curves(all_rows, "fraction", "accuracy")]),
        raw=raw,
        tables={"reference": _reference_table(reference)},
        fingerprints=fingerprints,
        seeds=seeds,
    )


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------

def _timed(fn: Callable[[], object]) -> Tuple[object, float]:
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def run_runtime(config: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentResult:
    """Time setup (tune + fit) and one explanation per method.

    Timings land in the `timings` table only; results.csv holds what each
    method produced, which does not depend on the clock.
    """
    data = load_dataset(config) if data is None else data
    methods = config.resolved_methods()
    kind = config.kernel_kinds()[0]
    seeds = config.resolved_seeds()
    reps = config.runtime.repetitions

    raw: Dict[int, pd.DataFrame] = {}
    timings: Dict[str, Dict[str, List[float]]] = {m: {"train": [], "test": []} for m in methods}
    fingerprints = {}
    for seed in seeds:
        _banner(f"RUNTIME seed {seed}")
        train, test = split(data, config.data.test_fraction, seed)
        ensemble = gbdt.fit(train, _ensemble_config(config, train, seed))
        fingerprints[f"seed_{seed}"] = ensemble.fingerprint
        q = int(np.random.default_rng(seed).integers(test.n))
        x_t = test.features[q]

        rows = []
        for method in methods:
            for _ in range(reps):
                if method == "teknn":
                    model, t_train = _timed(lambda: _teknn(ensemble, train, kind, config, seed))
                    nb, t_test = _timed(lambda: model.neighbors(explain.query_rep(ensemble, x_t, kind)))
                    top = int(model.train_rep.row_ids[nb[0, 0]])
                    param = float(model.k)
                    value = float(np.mean(model.target_labels[nb[0]] == 1))
                else:
                    model, t_train = _timed(lambda: _surrogate(method, ensemble, train, kind, config, seed))
                    expl, t_test = _timed(lambda: explain.local_explanation(model, ensemble, x_t))
                    top = int(explain.Ordering.from_scores(method, expl.aligned(), expl.row_ids).top(1)[0])
                    param = model.C
                    value = expl.decision
                timings[method]["train"].append(t_train)
                timings[method]["test"].append(t_test)
            logger.info("%s: setup %.3fs, explain %.4fs (last repetition)", method, t_train, t_test)
            rows.append({"seed": seed, "method": method, "query_row_id": int(test.row_ids[q]),
                         "param": param, "output": value, "top_row_id": top})
        raw[seed] = pd.DataFrame(rows)

    table = pd.DataFrame([
        {
            "method": m,
            "train_mean_s": float(np.mean(t["train"])),
            "train_std_s": float(np.std(t["train"])),
            "test_mean_s": float(np.mean(t["test"])),
            "test_std_s": float(np.std(t["test"])),
            "repetitions": len(t["train"]),
        }
        for m, t in timings.items()
    ])
    return ExperimentResult(
        experiment="runtime",
        results=pd.concat(raw.values(), ignore_index=True),
        raw=raw,
        tables={"timings": table},
        fingerprints=fingerprints,
        seeds=seeds,
    )


# ---------------------------------------------------------------------------
# Case study
# ---------------------------------------------------------------------------

def _histograms(values: np.ndarray, labels: np.ndarray, signed: np.ndarray,
                contrib: np.ndarray, bins: int) -> pd.DataFrame:
    edges = np.histogram_bin_edges(values, bins=bins)
    which = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    count = len(edges) - 1
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "positive_count": np.bincount(which, weights=(labels == 1).astype(float), minlength=count),
        "negative_count": np.bincount(which, weights=(labels == -1).astype(float), minlength=count),
        "weight_sum": np.bincount(which, weights=signed, minlength=count),
        "contribution_sum": np.bincount(which, weights=contrib, minlength=count),
    })


def run_case_study(config: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentResult:
    """Inject a subgroup mismatch, then explain a misclassified subgroup test row."""
    data = load_dataset(config) if data is None else data
    cs = config.case_study
    kind = config.kernel_kinds()[0]
    seed = config.resolved_seeds()[0]
    methods = config.resolved_methods()

    _banner(f"CASE STUDY seed {seed}")
    train, test = split(data, config.data.test_fraction, seed)
    corrupted, record = inject_domain_mismatch(
        train, cs.predicate_column, cs.threshold, cs.keep, cs.flip, seed,
    )
    ensemble = gbdt.fit(corrupted, _ensemble_config(config, corrupted, seed))

    in_group = test.column(cs.predicate_column) < cs.threshold
    wrong = gbdt.predict_label(ensemble, test.features) != test.labels
    candidates = np.flatnonzero(in_group & wrong)
    if candidates.size == 0:
        raise CaseStudyError(
            f"No misclassified test row with {cs.predicate_column} < {cs.threshold} "
            f"({int(in_group.sum())} subgroup test rows); try a larger flip count"
        )
    q = int(candidates[0])
    x_t = test.features[q]
    logger.info("Query row %d: true label %d, predicted %d (%d candidates)",
                int(test.row_ids[q]), int(test.labels[q]), -int(test.labels[q]), candidates.size)

    train_values = corrupted.column(cs.predicate_column)
    train_group = train_values < cs.threshold
    rows = []
    tables: Dict[str, pd.DataFrame] = {}
    for method in methods:
        model = _surrogate(method, ensemble, corrupted, kind, config, seed)
        expl = explain.local_explanation(model, ensemble, x_t, query_id=str(int(test.row_ids[q])))
        group_ids = set(int(r) for r in corrupted.row_ids[train_group])
        top_pos = expl.top_contributors(cs.top_k)
        top_sim = expl.top_similar(cs.top_k)
        rows.append({
            "method": method,
            "seed": seed,
            "query_row_id": int(test.row_ids[q]),
            "true_label": int(test.labels[q]),
            "predicted_label": expl.predicted_label,
            "decision": expl.decision,
            "flipped": record.count,
            "top_k": cs.top_k,
            "positive_in_top_k": int(top_pos.size),
            "subgroup_share_contribution": _share(top_pos, group_ids),
            "subgroup_share_similarity": _share(top_sim, group_ids),
        })
        if not tables:
            frame = expl.to_frame()
            frame.insert(1, cs.predicate_column, train_values)
            frame.insert(2, "label", corrupted.labels)
            frame["in_subgroup"] = train_group
            tables["explanation"] = frame
            tables["histograms"] = _histograms(
                train_values, corrupted.labels, expl.signed_weights, expl.contributions, cs.histogram_bins,
            )
    results = pd.DataFrame(rows)
    logger.info("Subgroup share of top-%d positive contributions: %s",
                cs.top_k, results["subgroup_share_contribution"].round(3).tolist())
    return ExperimentResult(
        experiment="case_study",
        results=results,
        raw={seed: results.copy()},
        tables=tables,
        fingerprints={f"seed_{seed}": ensemble.fingerprint},
        seeds=[seed],
    )


def _share(row_ids: np.ndarray, group: set) -> float:
    if row_ids.size == 0:
        return 0.0
    return float(np.mean([int(r) in group for r in row_ids]))


RUNNERS: Dict[str, Callable[..., ExperimentResult]] = {
    "fidelity": run_fidelity,
    "cleaning": run_cleaning,
    "roar": run_roar,
    "runtime": run_runtime,
    "case_study": run_case_study,
}


def run_experiment(config: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentResult:
    config.validate()
    return RUNNERS[config.experiment](config, data)
