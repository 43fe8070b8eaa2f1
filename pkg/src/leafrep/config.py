"""Configuration for leafrep experiments.

All settings are config-driven. Every field has a default, so an empty JSON
object is a valid config; CLI flags override individual fields afterwards.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from .gbdt import GBDTConfig
from .tree_kernel import KernelKind
from .utils import derive_seeds

EXPERIMENTS = ("fidelity", "cleaning", "roar", "runtime", "case_study")
METHODS = ("klr", "svm", "random", "gbdt_loss", "surrogate_loss", "teknn")
SURROGATE_LABELS = ("observed", "predicted")

# Methods each experiment accepts, and what it runs when none are given.
ALLOWED_METHODS = {
    "fidelity": ("klr", "svm", "teknn"),
    "cleaning": METHODS,
    "roar": ("klr", "svm", "random", "teknn"),
    "runtime": ("klr", "svm", "teknn"),
    "case_study": ("klr", "svm"),
}
DEFAULT_METHODS = {
    "fidelity": ["klr", "svm", "teknn"],
    "cleaning": ["klr", "svm", "random", "gbdt_loss", "surrogate_loss", "teknn"],
    "roar": ["klr", "random", "teknn"],
    "runtime": ["klr", "svm", "teknn"],
    "case_study": ["klr"],
}


# ---------------------------------------------------------------------------
# Sub-configs
# ---------------------------------------------------------------------------

@dataclass
class DataSettings:
    """Where rows come from. An empty path means the generated income table."""
    path: str = ""
    label_column: str = "label"
    positive_value: str = ">50K"
    categorical_columns: List[str] = field(default_factory=list)
    test_fraction: float = 0.2
    generated_rows: int = 2000


@dataclass
class GBDTSettings:
    """Ensemble hyperparameters; with `tune` the grid is searched by k-fold CV."""
    num_trees: int = 50
    max_depth: Optional[int] = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    reg_lambda: float = 1.0
    tune: bool = False
    tree_grid: List[int] = field(default_factory=lambda: [10, 100, 250])
    depth_grid: List[Optional[int]] = field(default_factory=lambda: [3, 5, 10, None])
    folds: int = 5

    def to_config(self, seed: int = 0) -> GBDTConfig:
        return GBDTConfig(
            num_trees=self.num_trees,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            min_samples_leaf=self.min_samples_leaf,
            seed=seed,
            reg_lambda=self.reg_lambda,
        )

    def grid(self, seed: int = 0) -> List[GBDTConfig]:
        return [
            GBDTConfig(
                num_trees=t, max_depth=d, learning_rate=self.learning_rate,
                min_samples_leaf=self.min_samples_leaf, seed=seed, reg_lambda=self.reg_lambda,
            )
            for t in self.tree_grid
            for d in self.depth_grid
        ]


@dataclass
class SurrogateSettings:
    """Surrogate tuning and solver parameters."""
    C_grid: List[float] = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0, 100.0])
    k_grid: Optional[List[int]] = None  # None: odd k in [3, 61]
    validation_fraction: float = 0.1
    tol: float = 1e-6
    max_epochs: int = 1000


@dataclass
class CleaningSettings:
    """`surrogate_labels`: `observed` fits the |alpha| surrogates to the corrupted labels,
    `predicted` to the ensemble's own labels."""
    surrogate_labels: str = "observed"
    flip_fraction: float = 0.4
    check_fractions: List[float] = field(
        default_factory=lambda: [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30]
    )


@dataclass
class RoarSettings:
    removal_fractions: List[float] = field(
        default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    )
    n_queries: int = 50


@dataclass
class RuntimeSettings:
    repetitions: int = 5


@dataclass
class CaseStudySettings:
    """Subgroup {predicate_column < threshold} is shrunk to `keep` rows, `flip` of them relabelled +1."""
    predicate_column: str = "age"
    threshold: float = 18.0
    keep: int = 98
    flip: int = 83
    top_k: int = 100
    histogram_bins: int = 20


# ---------------------------------------------------------------------------
# Top-level config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Root configuration of one experiment run."""
    experiment: str = "fidelity"
    methods: List[str] = field(default_factory=list)
    kernel: str = "LeafOutput"
    seeds: List[int] = field(default_factory=list)
    master_seed: int = 0
    repetitions: int = 5
    output_dir: str = "results"
    data: DataSettings = field(default_factory=DataSettings)
    gbdt: GBDTSettings = field(default_factory=GBDTSettings)
    surrogate: SurrogateSettings = field(default_factory=SurrogateSettings)
    cleaning: CleaningSettings = field(default_factory=CleaningSettings)
    roar: RoarSettings = field(default_factory=RoarSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)
    case_study: CaseStudySettings = field(default_factory=CaseStudySettings)

    def resolved_seeds(self) -> List[int]:
        """Explicit seeds if given, else master_seed + 1000 * r per repetition."""
        if self.seeds:
            return list(self.seeds)
        if self.repetitions < 1:
            return []
        return derive_seeds(self.master_seed, self.repetitions)

    def resolved_methods(self) -> List[str]:
        return list(self.methods) if self.methods else list(DEFAULT_METHODS[self.experiment])

    def kernel_kinds(self) -> List[KernelKind]:
        """`all` expands to every kernel kind."""
        if self.kernel.strip().lower() == "all":
            return list(KernelKind)
        return [KernelKind.parse(self.kernel)]

    def validate(self) -> "ExperimentConfig":
        """Raise ValueError on the first inconsistent setting; returns self."""
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"Unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for m in self.resolved_methods():
            if m not in ALLOWED_METHODS[self.experiment]:
                raise ValueError(
                    f"Method {m!r} is not valid for {self.experiment}; "
                    f"expected a subset of {list(ALLOWED_METHODS[self.experiment])}"
                )
        if len(self.kernel_kinds()) > 1 and self.experiment != "fidelity":
            raise ValueError(f"kernel 'all' is only valid for fidelity; {self.experiment} needs one kernel kind")
        if not self.resolved_seeds():
            raise ValueError("At least one seed is required")
        if not 0.0 < self.data.test_fraction < 1.0:
            raise ValueError(f"data.test_fraction must be in (0, 1), got {self.data.test_fraction}")
        for name, fractions in (
            ("cleaning.check_fractions", self.cleaning.check_fractions),
            ("roar.removal_fractions", self.roar.removal_fractions),
        ):
            if not fractions:
                raise ValueError(f"{name} is empty")
            if any(not 0.0 <= f <= 1.0 for f in fractions):
                raise ValueError(f"{name} must lie in [0, 1], got {fractions}")
            if list(fractions) != sorted(fractions):
                raise ValueError(f"{name} must be sorted ascending, got {fractions}")
        if not 0.0 <= self.cleaning.flip_fraction <= 1.0:
            raise ValueError(f"cleaning.flip_fraction must be in [0, 1], got {self.cleaning.flip_fraction}")
        if self.cleaning.surrogate_labels not in SURROGATE_LABELS:
            raise ValueError(
                f"cleaning.surrogate_labels must be one of {SURROGATE_LABELS}, got {self.cleaning.surrogate_labels!r}"
            )
        if not self.surrogate.C_grid or any(c <= 0 for c in self.surrogate.C_grid):
            raise ValueError(f"surrogate.C_grid must hold positive values, got {self.surrogate.C_grid}")
        if self.roar.n_queries < 1:
            raise ValueError(f"roar.n_queries must be >= 1, got {self.roar.n_queries}")
        if self.runtime.repetitions < 1:
            raise ValueError(f"runtime.repetitions must be >= 1, got {self.runtime.repetitions}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------

def _opt_int(value: Any) -> Optional[int]:
    return None if value is None else int(value)


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """Build a config from parsed JSON; missing keys take their defaults."""
    defaults = ExperimentConfig()

    d = raw.get("data", {})
    data = DataSettings(
        path=str(d.get("path", "")),
        label_column=str(d.get("label_column", "label")),
        positive_value=str(d.get("positive_value", ">50K")),
        categorical_columns=[str(c) for c in d.get("categorical_columns", [])],
        test_fraction=float(d.get("test_fraction", 0.2)),
        generated_rows=int(d.get("generated_rows", 2000)),
    )

    g = raw.get("gbdt", {})
    gbdt = GBDTSettings(
        num_trees=int(g.get("num_trees", 50)),
        max_depth=_opt_int(g.get("max_depth", 3)),
        learning_rate=float(g.get("learning_rate", 0.1)),
        min_samples_leaf=int(g.get("min_samples_leaf", 1)),
        reg_lambda=float(g.get("reg_lambda", 1.0)),
        tune=bool(g.get("tune", False)),
        tree_grid=[int(t) for t in g.get("tree_grid", defaults.gbdt.tree_grid)],
        depth_grid=[_opt_int(x) for x in g.get("depth_grid", defaults.gbdt.depth_grid)],
        folds=int(g.get("folds", 5)),
    )

    s = raw.get("surrogate", {})
    k_grid = s.get("k_grid")
    surrogate = SurrogateSettings(
        C_grid=[float(c) for c in s.get("C_grid", defaults.surrogate.C_grid)],
        k_grid=None if k_grid is None else [int(k) for k in k_grid],
        validation_fraction=float(s.get("validation_fraction", 0.1)),
        tol=float(s.get("tol", 1e-6)),
        max_epochs=int(s.get("max_epochs", 1000)),
    )

    c = raw.get("cleaning", {})
    cleaning = CleaningSettings(
        surrogate_labels=str(c.get("surrogate_labels", "observed")),
        flip_fraction=float(c.get("flip_fraction", 0.4)),
        check_fractions=[float(f) for f in c.get("check_fractions", defaults.cleaning.check_fractions)],
    )

    r = raw.get("roar", {})
    roar = RoarSettings(
        removal_fractions=[float(f) for f in r.get("removal_fractions", defaults.roar.removal_fractions)],
        n_queries=int(r.get("n_queries", 50)),
    )

    rt = raw.get("runtime", {})
    runtime = RuntimeSettings(repetitions=int(rt.get("repetitions", 5)))

    cs = raw.get("case_study", {})
    case_study = CaseStudySettings(
        predicate_column=str(cs.get("predicate_column", "age")),
        threshold=float(cs.get("threshold", 18.0)),
        keep=int(cs.get("keep", 98)),
        flip=int(cs.get("flip", 83)),
        top_k=int(cs.get("top_k", 100)),
        histogram_bins=int(cs.get("histogram_bins", 20)),
    )

    return ExperimentConfig(
        experiment=str(raw.get("experiment", "fidelity")).replace("-", "_"),
        methods=[str(m) for m in raw.get("methods", [])],
        kernel=str(raw.get("kernel", "LeafOutput")),
        seeds=[int(x) for x in raw.get("seeds", [])],
        master_seed=int(raw.get("master_seed", 0)),
        repetitions=int(raw.get("repetitions", 5)),
        output_dir=str(raw.get("output_dir", "results")),
        data=data,
        gbdt=gbdt,
        surrogate=surrogate,
        cleaning=cleaning,
        roar=roar,
        runtime=runtime,
        case_study=case_study,
    )


def load_config(path: str) -> ExperimentConfig:
    """Load config from a JSON file."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return config_from_dict(raw)


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_json(path: str, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
