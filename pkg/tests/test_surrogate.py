import json

import numpy as np
import pytest
from scipy import optimize, sparse

from leafrep import gbdt
from leafrep.surrogate import (
    Family,
    SurrogateModel,
    decision,
    decision_by_expansion,
    decisions,
    default_C_grid,
    dual_objective,
    fidelity,
    fit_klr,
    fit_surrogate,
    fit_svm,
    predict_proba,
    tune_C,
)
from leafrep.tree_kernel import KernelKind, KernelMismatchError, KernelRep, feature_map, transform


@pytest.fixture(scope="module")
def small(separable, separable_ensemble):
    """40 training rows mapped to LeafOutput space with the ensemble's labels."""
    part = separable.subset(np.arange(40))
    rep = transform(separable_ensemble, part, KernelKind.LEAF_OUTPUT)
    yhat = gbdt.predict_label(separable_ensemble, part.features)
    return rep, yhat


def _gram(rep, yhat):
    K = rep.gram()
    return yhat[:, None] * yhat[None, :] * K


def _klr_oracle(rep, yhat, C):
    Q = _gram(rep, yhat)
    eps = 1e-12

    def obj(a):
        return 0.5 * a @ Q @ a + np.sum(a * np.log(a) + (C - a) * np.log(C - a))

    def grad(a):
        return Q @ a + np.log(a) - np.log(C - a)

    res = optimize.minimize(
        obj, np.full(rep.n, C / 2), jac=grad, method="L-BFGS-B",
        bounds=[(eps, C - eps)] * rep.n, options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 20000},
    )
    return res.x, res.fun


def _svm_oracle(rep, yhat, C):
    Q = _gram(rep, yhat)
    res = optimize.minimize(
        lambda a: 0.5 * a @ Q @ a - a.sum(), np.zeros(rep.n), jac=lambda a: Q @ a - 1.0,
        method="L-BFGS-B", bounds=[(0.0, C)] * rep.n,
        options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 20000},
    )
    return res.x, res.fun


def _orthogonal_pair():
    matrix = sparse.csr_matrix(np.eye(2))
    return KernelRep(KernelKind.LEAF_PATH, 2, "f" * 64, matrix, np.arange(2))


# ---------------------------------------------------------------------------
# Solvers against a reference optimizer
# ---------------------------------------------------------------------------

def test_klr_matches_reference_optimizer(small):
    rep, yhat = small
    model = fit_klr(rep, yhat, 1.0)
    ref_alphas, ref_obj = _klr_oracle(rep, yhat, 1.0)
    assert model.converged
    assert model.objective() <= ref_obj + 1e-6
    assert model.objective() == pytest.approx(ref_obj, abs=1e-5)
    assert np.allclose(model.alphas, ref_alphas, atol=1e-3)


def test_svm_matches_reference_optimizer(small):
    rep, yhat = small
    model = fit_svm(rep, yhat, 0.5)
    _, ref_obj = _svm_oracle(rep, yhat, 0.5)
    assert model.converged
    assert model.objective() <= ref_obj + 1e-6
    assert model.objective() == pytest.approx(ref_obj, abs=1e-5)


def _random_problem(rng):
    n = int(rng.integers(2, 21))
    d = int(rng.integers(1, 6))
    matrix = sparse.csr_matrix(rng.uniform(-1.0, 1.0, size=(n, d)))
    rep = KernelRep(KernelKind.LEAF_OUTPUT, d, "c" * 64, matrix, np.arange(n))
    return rep, rng.choice([-1, 1], size=n)


@pytest.mark.parametrize("family, reference", [(Family.KLR, _klr_oracle), (Family.SVM, _svm_oracle)])
def test_solvers_match_reference_on_random_problems(family, reference):
    rng = np.random.default_rng(2024)
    for trial in range(50):
        rep, yhat = _random_problem(rng)
        C = (0.1, 1.0, 10.0)[trial % 3]
        model = fit_surrogate(rep, yhat, C, family, seed=trial)
        _, ref_obj = reference(rep, yhat, C)
        assert abs(model.objective() - ref_obj) <= 1e-6, f"trial {trial}: n={rep.n} d={rep.dimension} C={C}"


def test_two_point_svm():
    rep = _orthogonal_pair()
    model = fit_svm(rep, np.array([1, -1]), 10.0)
    assert np.allclose(model.alphas, [1.0, 1.0])
    assert np.allclose(decisions(model, rep), [1.0, -1.0])


def test_zero_norm_rows_go_to_the_box():
    rep = KernelRep(KernelKind.LEAF_OUTPUT, 2, "e" * 64,
                    sparse.csr_matrix(np.array([[0.0, 0.0], [1.0, 0.0]])), np.arange(2))
    model = fit_svm(rep, np.array([1, 1]), 2.0)
    assert model.alphas[0] == 2.0


# ---------------------------------------------------------------------------
# Solution properties
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("family", [Family.KLR, Family.SVM])
def test_alphas_stay_in_box(small, family):
    rep, yhat = small
    model = fit_surrogate(rep, yhat, 0.3, family)
    assert np.all(model.alphas >= 0.0) and np.all(model.alphas <= 0.3)
    if family is Family.KLR:
        assert np.all(model.alphas > 0.0) and np.all(model.alphas < 0.3)


@pytest.mark.parametrize("family", [Family.KLR, Family.SVM])
def test_label_symmetry(small, family):
    rep, yhat = small
    a = fit_surrogate(rep, yhat, 1.0, family, seed=3)
    b = fit_surrogate(rep, -yhat, 1.0, family, seed=3)
    assert np.allclose(a.alphas, b.alphas)
    assert np.allclose(decisions(a, rep), -decisions(b, rep))


@pytest.mark.parametrize("family", [Family.KLR, Family.SVM])
def test_decision_equals_expansion(small, family):
    rep, yhat = small
    model = fit_surrogate(rep, yhat, 1.0, family)
    for i in (0, 9, 31):
        x_map = rep.map_at(i)
        assert decision(model, x_map) == pytest.approx(decision_by_expansion(model, x_map))


@pytest.mark.parametrize("family", [Family.KLR, Family.SVM])
def test_representer_identity_on_random_queries(separable, separable_ensemble, family):
    rep = transform(separable_ensemble, separable, KernelKind.LEAF_OUTPUT)
    model = fit_surrogate(rep, gbdt.predict_label(separable_ensemble, separable.features), 1.0, family)
    queries = np.random.default_rng(7).uniform(-1.0, 1.0, size=(100, separable.d))
    for x in queries:
        x_map = feature_map(separable_ensemble, x, KernelKind.LEAF_OUTPUT)
        value = decision(model, x_map)
        assert abs(decision_by_expansion(model, x_map) - value) / max(1.0, abs(value)) <= 1e-8


def test_fit_is_deterministic(small):
    rep, yhat = small
    assert np.array_equal(fit_klr(rep, yhat, 1.0, seed=5).alphas, fit_klr(rep, yhat, 1.0, seed=5).alphas)


def test_svm_is_sparse_and_agrees_in_sign(separable, separable_ensemble):
    rep = transform(separable_ensemble, separable, KernelKind.LEAF_OUTPUT)
    yhat = gbdt.predict_label(separable_ensemble, separable.features)
    model = fit_svm(rep, yhat, 1.0)
    assert model.support_mask().sum() < model.n
    agree = np.mean(np.sign(decisions(model, rep)) == yhat)
    assert agree >= 0.95


def test_zero_weights_predict_one_half(small):
    rep, yhat = small
    model = SurrogateModel(
        family=Family.KLR, C=1.0, alphas=np.zeros(rep.n), target_labels=yhat,
        train_rep=rep, primal_weights=np.zeros(rep.dimension),
    )
    assert predict_proba(model, rep.map_at(0)) == 0.5
    assert np.all(model.contributions(rep.map_at(0)) == 0.0)


def test_dual_objective_klr_at_midpoint():
    rep = _orthogonal_pair()
    value = dual_objective(rep, [1, -1], [0.5, 0.5], 1.0, Family.KLR)
    assert value == pytest.approx(0.5 * 0.5 + 2 * np.log(0.5))


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

def test_fit_rejects_bad_inputs(small):
    rep, yhat = small
    with pytest.raises(ValueError, match="C must be positive"):
        fit_klr(rep, yhat, 0.0)
    with pytest.raises(ValueError, match="labels"):
        fit_svm(rep, yhat[:-1], 1.0)
    with pytest.raises(ValueError, match="zero rows"):
        fit_svm(rep.subset([]), np.array([], dtype=int), 1.0)
    with pytest.raises(KernelMismatchError):
        fit_klr(rep, yhat, 1.0, ensemble_fingerprint="0" * 64)


def test_fit_surrogate_rejects_knn(small):
    rep, yhat = small
    with pytest.raises(ValueError):
        fit_surrogate(rep, yhat, 1.0, "knn")


def test_decision_rejects_other_kernel(small, separable_ensemble, separable):
    rep, yhat = small
    model = fit_svm(rep, yhat, 1.0)
    other = transform(separable_ensemble, separable.subset([0]), KernelKind.LEAF_PATH)
    with pytest.raises(KernelMismatchError):
        decision(model, other.map_at(0))


# ---------------------------------------------------------------------------
# Fidelity, tuning and persistence
# ---------------------------------------------------------------------------

def test_default_C_grid():
    assert default_C_grid() == pytest.approx([0.01, 0.1, 1.0, 10.0, 100.0])


def test_tune_C_refits_on_full_train(separable, separable_ensemble):
    C, report, model = tune_C(separable_ensemble, separable, Family.SVM, "LeafOutput",
                              [0.1, 1.0], seed=2)
    assert C in (0.1, 1.0)
    assert model.C == C
    assert model.n == separable.n
    assert report.n_eval == 10
    assert -1.0 <= report.pearson <= 1.0


def test_tune_C_on_observed_labels_weights_flipped_rows(separable, separable_ensemble):
    flipped = np.arange(0, 100, 10)
    labels = separable.labels.copy()
    labels[flipped] *= -1
    noisy = separable.with_labels(labels)
    _, _, model = tune_C(separable_ensemble, noisy, Family.KLR, KernelKind.LEAF_OUTPUT,
                         [0.1, 1.0], seed=0, observed_labels=True)
    assert np.array_equal(model.target_labels, labels)
    clean = np.setdiff1d(np.arange(separable.n), flipped)
    assert model.alphas[flipped].mean() > model.alphas[clean].mean()

    _, _, default = tune_C(separable_ensemble, noisy, Family.KLR, KernelKind.LEAF_OUTPUT, [1.0])
    assert np.array_equal(default.target_labels, gbdt.predict_label(separable_ensemble, noisy.features))


def test_tune_C_errors(separable, separable_ensemble):
    with pytest.raises(ValueError, match="empty"):
        tune_C(separable_ensemble, separable, Family.KLR, KernelKind.LEAF_PATH, [])
    with pytest.raises(ValueError, match="Validation split"):
        tune_C(separable_ensemble, separable.subset(np.arange(10)), Family.KLR,
               KernelKind.LEAF_PATH, [1.0], validation_fraction=0.1)


def test_fidelity_is_high_on_separable(separable, separable_ensemble):
    _, _, model = tune_C(separable_ensemble, separable, Family.SVM, KernelKind.LEAF_OUTPUT, [1.0])
    report = fidelity(model, separable_ensemble, separable)
    assert report.pearson > 0.5
    assert report.to_dict()["family"] == "SVM"


def test_save_and_load(small, tmp_path):
    rep, yhat = small
    model = fit_klr(rep, yhat, 1.0)
    path = str(tmp_path / "klr.json")
    model.save(path)
    loaded = SurrogateModel.load(path, rep)
    assert np.array_equal(loaded.alphas, model.alphas)
    assert np.allclose(loaded.primal_weights, model.primal_weights)

    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    with pytest.raises(ValueError, match="rows"):
        SurrogateModel.from_dict(dict(raw), rep.subset(np.arange(5)))
    raw["primal_norm"] += 1.0
    with pytest.raises(ValueError, match="reproduce"):
        SurrogateModel.from_dict(raw, rep)
