"""Experiment output writer.

Lays out one run's artifacts in an output directory:

    results.csv          aggregate table (deterministic for fixed config and seeds)
    raw/seed_<k>.csv     per-seed rows behind the aggregate
    <table>.csv          experiment-specific extras (timings, histograms, ...)
    plots/*.svg          matplotlib renderings of the tables
    meta.json            resolved config, seeds and ensemble fingerprints

CSV files are the contract; the SVG plots are a convenience.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from . import __version__  # noqa: E402
from .config import save_json  # noqa: E402

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Colors
# ---------------------------------------------------------------------------
_GREEN = "#16a34a"
_AMBER = "#ca8a04"
_RED = "#dc2626"
_BLUE = "#2563eb"
_GRAY = "#64748b"
_PURPLE = "#7c3aed"

_METHOD_COLORS = {
    "klr": _GREEN,
    "svm": _BLUE,
    "random": _GRAY,
    "gbdt_loss": _RED,
    "surrogate_loss": _AMBER,
    "teknn": _PURPLE,
}

plt.rcParams["svg.hashsalt"] = "leafrep"


def _method_color(method: str) -> str:
    return _METHOD_COLORS.get(method, _GRAY)


@dataclass
class ExperimentResult:
    """Everything one experiment produced, before it is written out."""
    experiment: str
    results: pd.DataFrame
    raw: Dict[int, pd.DataFrame] = field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    fingerprints: Dict[str, str] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Plot builders
# ---------------------------------------------------------------------------

def _save(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curves(
    path: str,
    curves: pd.DataFrame,
    title: str,
    xlabel: str,
    ylabel: str,
    reference: Optional[Dict[str, float]] = None,
) -> None:
    """One line per method with standard-error bars; `reference` adds dashed horizontals."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, group in curves.groupby("method", sort=True):
        group = group.sort_values("x")
        ax.errorbar(
            group["x"], group["mean_y"], yerr=group["stderr_y"],
            label=method, color=_method_color(method), marker="o", capsize=3,
        )
    for name, value in sorted((reference or {}).items()):
        ax.axhline(value, linestyle="--", color=_GRAY, linewidth=1)
        ax.annotate(name, (0.01, value), xycoords=("axes fraction", "data"), fontsize=8, color=_GRAY)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_scatter(path: str, x, y, title: str, xlabel: str, ylabel: str, color: str = _BLUE,
                 diagonal: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(x, y, s=8, color=color, alpha=0.6)
    if diagonal:
        ax.plot([0, 1], [0, 1], linestyle="--", color=_GRAY, linewidth=1)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    _save(fig, path)


def plot_bars(path: str, left, right, heights: Dict[str, np.ndarray], title: str, xlabel: str) -> None:
    """One panel per series over shared bins [left, right)."""
    fig, axes = plt.subplots(len(heights), 1, figsize=(6, 2.4 * len(heights)), squeeze=False)
    left = np.asarray(left, dtype=float)
    widths = np.asarray(right, dtype=float) - left
    for ax, (name, values) in zip(axes[:, 0], heights.items()):
        values = np.asarray(values, dtype=float)
        ax.bar(left, values, width=widths, align="edge",
               color=np.where(values >= 0, _GREEN, _RED), edgecolor="white")
        ax.set_ylabel(name, fontsize=8)
    axes[0, 0].set_title(title)
    axes[-1, 0].set_xlabel(xlabel)
    _save(fig, path)


def plot_timings(path: str, timings: pd.DataFrame) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = list(timings["method"])
    pos = np.arange(len(methods))
    ax.bar(pos - 0.2, timings["train_mean_s"], width=0.4, yerr=timings["train_std_s"],
           label="train", color=_BLUE)
    ax.bar(pos + 0.2, timings["test_mean_s"], width=0.4, yerr=timings["test_std_s"],
           label="test", color=_AMBER)
    ax.set_xticks(pos)
    ax.set_xticklabels(methods)
    ax.set_ylabel("seconds")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("Runtime")
    _save(fig, path)


# ---------------------------------------------------------------------------
# Per-experiment plot sections
# ---------------------------------------------------------------------------

def _plots_fidelity(result: ExperimentResult, plots: str) -> None:
    scatter = result.tables.get("scatter")
    if scatter is None or scatter.empty:
        return
    first = scatter["seed"].min()
    for (method, kernel), group in scatter[scatter["seed"] == first].groupby(["method", "kernel"], sort=True):
        row = result.results[(result.results["method"] == method) & (result.results["kernel"] == kernel)]
        r = float(row["mean_pearson"].iloc[0]) if not row.empty else float("nan")
        plot_scatter(
            os.path.join(plots, f"fidelity_{method}_{kernel}.svg"),
            group["ensemble_proba"], group["surrogate_proba"],
            f"{method} / {kernel} (pearson {r:.3f})", "GBDT probability", "surrogate probability",
            color=_method_color(method), diagonal=True,
        )


def _plots_curves(result: ExperimentResult, plots: str, title: str, xlabel: str) -> None:
    reference = None
    ref = result.tables.get("reference")
    if ref is not None and not ref.empty:
        reference = {str(r["model"]): float(r["mean_accuracy"]) for _, r in ref.iterrows()}
    curves = result.results.dropna(subset=["mean_y"])
    plot_curves(os.path.join(plots, f"{result.experiment}.svg"), curves, title, xlabel,
                "test accuracy", reference)


def _plots_case_study(result: ExperimentResult, plots: str) -> None:
    expl = result.tables.get("explanation")
    if expl is not None and not expl.empty:
        colors = np.where(expl["in_subgroup"], _RED, _BLUE)
        plot_scatter(
            os.path.join(plots, "case_study_scatter.svg"),
            expl["gamma"], expl["signed_weight"], "Similarity vs signed weight",
            "similarity (gamma)", "alpha * yhat", color=colors,
        )
    hist = result.tables.get("histograms")
    if hist is not None and not hist.empty:
        plot_bars(
            os.path.join(plots, "case_study_histograms.svg"),
            hist["bin_left"], hist["bin_right"],
            {
                "label count (+1 minus -1)": hist["positive_count"] - hist["negative_count"],
                "sum alpha*yhat": hist["weight_sum"],
                "sum alpha*yhat*gamma": hist["contribution_sum"],
            },
            "Training rows by predicate column", "predicate column",
        )


def write_plots(result: ExperimentResult, plots: str) -> None:
    if result.experiment == "fidelity":
        _plots_fidelity(result, plots)
    elif result.experiment == "cleaning":
        _plots_curves(result, plots, "Dataset cleaning", "fraction of training data checked")
    elif result.experiment == "roar":
        _plots_curves(result, plots, "Remove and retrain", "fraction of training data removed")
    elif result.experiment == "runtime":
        timings = result.tables.get("timings")
        if timings is not None and not timings.empty:
            plot_timings(os.path.join(plots, "runtime.svg"), timings)
    elif result.experiment == "case_study":
        _plots_case_study(result, plots)


# ---------------------------------------------------------------------------
# Directory writer
# ---------------------------------------------------------------------------

def _write_csv(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")


def write_experiment(result: ExperimentResult, out_dir: str, config: Dict[str, Any]) -> str:
    """Write all artifacts of `result` under `out_dir`; returns the results.csv path."""
    raw_dir = os.path.join(out_dir, "raw")
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(raw_dir, exist_ok=True)
    os.makedirs(plots_dir, exist_ok=True)

    results_path = os.path.join(out_dir, "results.csv")
    _write_csv(result.results, results_path)
    for seed, frame in sorted(result.raw.items()):
        _write_csv(frame, os.path.join(raw_dir, f"seed_{seed}.csv"))
    for name, frame in sorted(result.tables.items()):
        _write_csv(frame, os.path.join(out_dir, f"{name}.csv"))

    try:
        write_plots(result, plots_dir)
    except Exception as e:
        logger.warning("Plot rendering failed: %s", e, exc_info=True)

    save_json(os.path.join(out_dir, "meta.json"), {
        "experiment": result.experiment,
        "leafrep_version": __version__,
        "seeds": [int(s) for s in result.seeds],
        "fingerprints": result.fingerprints,
        "config": config,
    })
    logger.info("Wrote %s results to %s", result.experiment, out_dir)
    return results_path
