import numpy as np
import pytest
from scipy.special import expit

from matchtree.cohort import NODES, Cohort, CovariateEntry, CovariateSchema, Subject
from matchtree.pipeline import one_sided_levels
from matchtree.propensity import (
    DesignError,
    SeparationError,
    balance_residual,
    design_matrix,
    fit_balance,
    fit_max_likelihood,
    weighted_means,
)


def make_cohort(rows, schema):
    subjects = tuple(Subject(f"s{i}", r) for i, r in enumerate(rows))
    return Cohort(subjects, schema, {}, {}, ())


def node_design(sim, node):
    col = {n: j for j, n in enumerate(NODES)}
    rows = np.flatnonzero(sim.members[:, col[node]] | sim.members[:, col["control"]])
    z = sim.members[rows, col[node]]
    dm = design_matrix(sim.cohort, rows, drop_levels=one_sided_levels(sim.cohort, rows, z))
    return dm, z.astype(float)


def test_binary_covariate_shape():
    schema = CovariateSchema((CovariateEntry("g", "categorical", ("a", "b")),))
    dm = design_matrix(make_cohort([{"g": v} for v in "abab"], schema))
    assert dm.shape == (4, 2)
    assert dm.labels == ("(intercept)", "g=b")


def test_constant_continuous_column():
    schema = CovariateSchema((CovariateEntry("age", "continuous"),))
    with pytest.raises(DesignError, match="zero variance column"):
        design_matrix(make_cohort([{"age": 15.0}] * 3, schema))


def test_identical_subjects_identical_rows():
    schema = CovariateSchema((CovariateEntry("age", "continuous"), CovariateEntry("g", "categorical", ("a", "b"))))
    dm = design_matrix(make_cohort([{"age": 14.0, "g": "a"}, {"age": 14.0, "g": "a"}, {"age": 16.0, "g": "b"}], schema))
    np.testing.assert_array_equal(dm.matrix[0], dm.matrix[1])


def test_intercept_only_mle():
    z = np.r_[np.ones(30), np.zeros(70)]
    fit = fit_max_likelihood(np.ones((100, 1)), z)
    assert fit.coefficients[0] == pytest.approx(np.log(30 / 70), abs=1e-6)
    assert fit.coefficients[0] == pytest.approx(-0.8473, abs=1e-4)


def test_separation():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x])
    with pytest.raises(SeparationError):
        fit_max_likelihood(X, (x > 4.5).astype(float))


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 3))])
    z = (rng.random(200) < expit(X @ [0.2, 0.5, -0.3, 0.1])).astype(float)
    perm = rng.permutation(200)
    a = fit_max_likelihood(X, z).coefficients
    b = fit_max_likelihood(X[perm], z[perm]).coefficients
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_mle_score(small_sim):
    dm, z = node_design(small_sim, "any_activity")
    fit = fit_max_likelihood(dm.matrix, z)
    score = dm.matrix.T @ (z - fit.fitted)
    assert np.abs(score).max() <= 1e-8


@pytest.mark.parametrize("node", ["any_activity", "any_sports", "no_sports", "any_contact"])
def test_balance_fit_residual_and_weighted_means(small_sim, node):
    dm, z = node_design(small_sim, node)
    fit = fit_balance(dm.matrix, z)
    assert fit.converged and fit.method == "balance_conditions"
    assert np.abs(balance_residual(dm.matrix, z, fit.coefficients)).max() <= 1e-6
    # oracle: recompute the weighted means directly from the fitted probabilities
    pi = expit(dm.matrix @ fit.coefficients)
    w1, w0 = z / pi, (1 - z) / (1 - pi)
    m1 = (w1[:, None] * dm.matrix).sum(0) / w1.sum()
    m0 = (w0[:, None] * dm.matrix).sum(0) / w0.sum()
    assert np.abs(m1 - m0).max() <= 1e-6
    a, b = weighted_means(dm.matrix, z, fit.fitted)
    np.testing.assert_allclose(a, m1, atol=1e-12)
    np.testing.assert_allclose(b, m0, atol=1e-12)
    assert np.all((fit.scores() > 0) & (fit.scores() < 1))


def test_reference_relabel_invariance():
    rng = np.random.default_rng(3)
    levels = ("a", "b", "c")
    rows = [{"g": levels[rng.integers(3)], "age": float(rng.normal(15, 1))} for _ in range(300)]
    fits = []
    for order in [("a", "b", "c"), ("c", "a", "b")]:
        schema = CovariateSchema((CovariateEntry("age", "continuous"), CovariateEntry("g", "categorical", order)))
        cohort = make_cohort(rows, schema)
        dm = design_matrix(cohort)
        eta = 0.3 * dm.matrix[:, 1] + 0.5 * np.array([r["g"] == "b" for r in rows])
        z = (np.random.default_rng(4).random(300) < expit(eta)).astype(float)
        fits.append((fit_max_likelihood(dm.matrix, z).fitted, fit_balance(dm.matrix, z).fitted))
    np.testing.assert_allclose(fits[0][0], fits[1][0], atol=1e-8)
    np.testing.assert_allclose(fits[0][1], fits[1][1], atol=1e-8)


def test_independent_exposure_slopes_centered():
    # z independent of X: balance-fit slopes should scatter around zero
    rng = np.random.default_rng(5)
    slopes = []
    for _ in range(1000):
        X = np.column_stack([np.ones(500), rng.normal(size=500), rng.random(500) < 0.4])
        z = (rng.random(500) < 0.3).astype(float)
        slopes.append(fit_balance(X, z).coefficients[1:])
    slopes = np.array(slopes)
    se = slopes.std(axis=0) / np.sqrt(len(slopes))
    assert np.all(np.abs(slopes.mean(axis=0)) < 3 * se)


def test_dropped_reference_level_pools_with_next():
    schema = CovariateSchema((CovariateEntry("g", "categorical", ("a", "b", "c")),))
    dm = design_matrix(make_cohort([{"g": v} for v in "abcabc"], schema), drop_levels=frozenset({"g=a"}))
    assert dm.labels == ("(intercept)", "g=c")
    assert "g=a" in dm.dropped
