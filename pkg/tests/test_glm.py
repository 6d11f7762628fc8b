import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from policy_bundles import glm
from policy_bundles.errors import ConfigError, ConvergenceError, DataError, NumericalError
from policy_bundles.ingest import assemble_panel
from policy_bundles.synthetic import generate_synthetic_panel, SyntheticConfig

from conftest import full_size_panel, truth_panel


@pytest.fixture(scope="module")
def full_panels():
    out = {}
    for k in (4, 10, 20):
        outcomes, covariates, labels = full_size_panel(n_clusters=k, seed=k)
        rows, _ = assemble_panel(outcomes, covariates, labels, (2006, 2016), lags=(1, 2, 3, 4, 5))
        out[k] = rows
    return out


@pytest.fixture(scope="module")
def recovery():
    ds = generate_synthetic_panel(SyntheticConfig(n_states=40), seed=21)
    panel = truth_panel(ds)
    fit = glm.fit_poisson_irls(glm.build_design_matrix(panel, glm.ModelSpec()))
    return ds, panel, fit


# -- design --------------------------------------------------------------------------


@pytest.mark.parametrize("k, lags, n_columns", [
    (10, (), 66),
    (10, (1,), 75),
    (10, (2,), 75),
    (10, (1, 2, 3, 4, 5), 111),
    (4, (1,), 69),
    (20, (1,), 85),
    (20, (1, 2, 3, 4, 5), 161),
])
def test_reference_design_column_counts(full_panels, k, lags, n_columns):
    design = glm.build_design_matrix(full_panels[k], glm.ModelSpec(cluster_lags=lags))
    assert design.X.shape == (1122, n_columns)
    assert design.dropped_columns == ()
    assert design.columns[0] == "(Intercept)"
    assert sum(c.startswith("factor(state)") for c in design.columns) == 50
    assert sum(c.startswith("factor(year)") for c in design.columns) == 10
    for L in lags:
        names = [c for c in design.columns if c.startswith(f"factor(cluster.lag{L})")]
        assert names == [glm.cluster_term(L, c) for c in range(2, k + 1)]
    np.testing.assert_array_equal(design.offset, np.log([r.population for r in full_panels[k]]))


def test_column_order_and_coding(full_panels):
    design = glm.build_design_matrix(full_panels[10], glm.ModelSpec(cluster_lags=(1,)))
    assert design.columns[1] == "factor(state)AL"  # AK is the reference
    assert design.columns[51] == "factor(year)2007"
    assert design.columns[61:66] == ("GenderMale", "Prescribing.Rate", "Gini", "Income", "Deaths.lag1")
    assert design.columns[66] == "factor(cluster.lag1)2"
    male = design.X[:, 61]
    assert set(male.tolist()) == {0.0, 1.0}
    assert [k[2] for k in design.row_keys[:2]] == ["Female", "Male"]
    assert male[1] == 1.0 and male[0] == 0.0


def test_linear_year_and_reference_levels(full_panels):
    spec = glm.ModelSpec(cluster_lags=(1,), year_mode="linear", reference_levels={"state": "CA", "cluster": 3})
    design = glm.build_design_matrix(full_panels[10], spec)
    assert design.X.shape[1] == 75 - 10 + 1
    assert "factor(state)AK" in design.columns and "factor(state)CA" not in design.columns
    assert "factor(cluster.lag1)1" in design.columns and "factor(cluster.lag1)3" not in design.columns
    with pytest.raises(ConfigError):
        glm.build_design_matrix(full_panels[10], glm.ModelSpec(reference_levels={"state": "XX"}))
    with pytest.raises(ConfigError):
        glm.ModelSpec(year_mode="spline")
    with pytest.raises(ConfigError):
        glm.ModelSpec(covariates=("unemployment",))


def test_incomplete_rows_rejected_or_dropped():
    outcomes, covariates, labels = full_size_panel(seed=1)
    labels = {k: v for k, v in labels.items() if k != ("AK", 2005)}
    rows, _ = assemble_panel(outcomes, covariates, labels, (2006, 2016), lags=(1,))
    with pytest.raises(DataError, match="lack lags"):
        glm.build_design_matrix(rows, glm.ModelSpec())
    design = glm.build_design_matrix(rows, glm.ModelSpec(), drop_incomplete=True)
    assert design.n_dropped_rows == 2 and design.n_rows == 1120
    assert design.dropped_rows == ("AK:2006:Female", "AK:2006:Male")
    # the model without cluster terms only needs lagged deaths
    assert glm.build_design_matrix(rows, glm.ModelSpec(cluster_lags=())).n_rows == 1122


def test_single_level_factor_rejected(full_panels):
    one_state = [r for r in full_panels[10] if r.state == "AK"]
    with pytest.raises(DataError, match="single observed level"):
        glm.build_design_matrix(one_state, glm.ModelSpec())


def test_aliased_columns_dropped_and_reported(full_panels):
    # a covariate constant within each state is a combination of state dummies
    gini = {s: 0.3 + 0.005 * i for i, s in enumerate(sorted({r.state for r in full_panels[10]}))}
    rows = [replace(r, gini=gini[r.state]) for r in full_panels[10]]
    design = glm.build_design_matrix(rows, glm.ModelSpec())
    assert design.dropped_columns == ("Gini",)
    assert "Gini" not in design.columns and design.X.shape[1] == 74
    fit = glm.fit_poisson_irls(design)
    assert fit.dropped_columns == ("Gini",)
    assert glm.fit_report(fit)["aliased_columns"] == ["Gini"]


def test_independent_columns():
    x = np.array([[1, 1, 2, 0], [1, 0, 1, 1], [1, 1, 2, 1], [1, 0, 1, 0.0]])
    assert glm.independent_columns(x) == [0, 1, 3]


# -- fitting -------------------------------------------------------------------------


def test_intercept_only_closed_form():
    fit = glm.fit_poisson_irls(glm.design_from_arrays(np.ones((4, 1)), [2, 4, 6, 4]))
    assert abs(fit.coef[0] - math.log(4)) < 1e-10


def test_two_group_closed_form():
    X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
    fit = glm.fit_poisson_irls(glm.design_from_arrays(X, [1, 2, 3, 5, 6, 7]))
    assert abs(fit.coef[0] - math.log(2)) < 1e-10
    assert abs(fit.coef[1] - math.log(3)) < 1e-10


def test_offset_enters_with_unit_coefficient():
    exposure = np.array([10.0, 20.0, 40.0, 80.0])
    y = np.array([3, 6, 12, 24])
    fit = glm.fit_poisson_irls(glm.design_from_arrays(np.ones((4, 1)), y, np.log(exposure)))
    assert abs(fit.coef[0] - math.log(0.3)) < 1e-10


def test_orthogonal_design_standard_errors():
    # 2x2 factorial with +-1 contrasts, two rows per cell, all counts 1:
    # mu = 1 everywhere so the weights are 1 and cov = (X'X)^-1 = I/8
    a = np.array([-1, -1, 1, 1, -1, -1, 1, 1.0])
    b = np.array([-1, 1, -1, 1, -1, 1, -1, 1.0])
    X = np.column_stack([np.ones(8), a, b])
    fit = glm.fit_poisson_irls(glm.design_from_arrays(X, np.ones(8)))
    np.testing.assert_allclose(fit.coef, 0.0, atol=1e-9)
    np.testing.assert_allclose(glm.standard_errors(fit), np.full(3, 1 / math.sqrt(8)), rtol=1e-9)


def test_covariance_is_inverse_weighted_information(recovery):
    _, _, fit = recovery
    X, mu = fit.design.X, fit.fitted
    info = X.T @ (mu[:, None] * X)
    np.testing.assert_allclose(fit.cov @ info, np.eye(len(fit.coef)), atol=1e-6)
    np.testing.assert_array_equal(fit.cov, fit.cov.T)
    assert np.linalg.eigvalsh(fit.cov).min() > 0


def test_duplicated_rows_shrink_se_by_root_two(recovery):
    _, _, fit = recovery
    d = fit.design
    twice = glm.design_from_arrays(np.vstack([d.X, d.X]), np.concatenate([d.y, d.y]),
                                   np.concatenate([d.offset, d.offset]), d.columns)
    fit2 = glm.fit_poisson_irls(twice)
    # both fits stop on the same deviance tolerance, not at the same iterate
    np.testing.assert_allclose(fit2.coef, fit.coef, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(glm.standard_errors(fit2), glm.standard_errors(fit) / math.sqrt(2), rtol=1e-6)


def test_score_vanishes_at_convergence(recovery):
    _, _, fit = recovery
    assert np.max(np.abs(glm.score(fit))) <= 1e-6 * fit.design.y.sum()
    assert fit.converged and 2 <= fit.iterations <= 50
    assert list(fit.trace) == sorted(fit.trace, reverse=True)


def test_score_matches_finite_differences(recovery):
    _, _, fit = recovery
    d = fit.design
    rng = np.random.default_rng(0)

    def loglik(beta):
        return glm.poisson_log_likelihood(d.y, np.exp(d.offset + d.X @ beta))

    for _ in range(3):
        beta = fit.coef + rng.normal(0, 0.01, size=len(fit.coef))
        g = glm.score(fit, beta)
        idx = rng.choice(len(beta), size=8, replace=False)
        for j in idx:
            e = np.zeros(len(beta))
            e[j] = 1e-6
            fd = (loglik(beta + e) - loglik(beta - e)) / 2e-6
            assert fd == pytest.approx(g[j], rel=1e-4, abs=1e-4 * np.max(np.abs(g)))


def test_reordering_rows_leaves_coefficients(recovery):
    _, panel, fit = recovery
    perm = np.random.default_rng(2).permutation(len(panel))
    refit = glm.fit_poisson_irls(glm.build_design_matrix([panel[i] for i in perm], glm.ModelSpec()))
    assert refit.names == fit.names
    np.testing.assert_allclose(refit.coef, fit.coef, rtol=0, atol=1e-10)


def test_fit_is_bit_reproducible(recovery):
    _, panel, fit = recovery
    again = glm.fit_poisson_irls(glm.build_design_matrix(panel, glm.ModelSpec()))
    assert again.coef.tobytes() == fit.coef.tobytes()
    assert again.cov.tobytes() == fit.cov.tobytes()


def test_planted_coefficients_recovered(recovery):
    ds, _, fit = recovery
    se = glm.standard_errors(fit)
    truth = ds.truth
    targets = {
        "factor(cluster.lag1)2": truth.log_rate_ratios[1][2],
        "factor(cluster.lag1)3": truth.log_rate_ratios[1][3],
        "GenderMale": truth.male,
        "Prescribing.Rate": truth.prescribing_rate,
        "Gini": truth.gini,
        "Income": truth.income,
        "Deaths.lag1": truth.deaths_lag,
    }
    for name, value in targets.items():
        i = fit.index(name)
        assert abs(fit.coef[i] - value) < 3 * se[i], name


def test_refit_deviance_on_model_simulated_data(recovery):
    _, _, fit = recovery
    d = fit.design
    rng = np.random.default_rng(4)
    ratios = []
    for _ in range(5):
        ystar = rng.poisson(fit.fitted)
        refit = glm.fit_poisson_irls(glm.design_from_arrays(d.X, ystar, d.offset, d.columns))
        ratios.append(refit.deviance / (len(ystar) - refit.n_params))
    assert 0.8 < np.mean(ratios) < 1.2


def test_non_convergence_reports_trajectory(recovery):
    _, _, fit = recovery
    with pytest.raises(ConvergenceError) as err:
        glm.fit_poisson_irls(fit.design, max_iter=1)
    assert len(err.value.trajectory) == 1


def test_separation_guard():
    # an all-zero group drives its log rate towards -inf
    X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
    design = glm.design_from_arrays(X, [0, 0, 0, 4, 5, 6])
    with pytest.raises(ConvergenceError, match="separation") as err:
        glm.fit_poisson_irls(design, tol=1e-15)
    assert err.value.trajectory
    with pytest.raises(ConvergenceError, match="separation"):
        glm.fit_poisson_irls(design, coef_bound=10.0)
    # at the default tolerance the deviance settles before the guard is hit
    fit = glm.fit_poisson_irls(design)
    assert -30 < fit.coef[0] < -15


def test_bad_response():
    with pytest.raises(DataError):
        glm.fit_poisson_irls(glm.design_from_arrays(np.ones((3, 1)), [1, -1, 2]))
    with pytest.raises(DataError):
        glm.fit_poisson_irls(glm.design_from_arrays(np.ones((3, 1)), [1, 1.5, 2]))


# -- likelihood and AIC ------------------------------------------------------------------


def test_aic_formula():
    assert glm.aic(-100.0, 5) == 210.0


def test_aic_identity_on_fits(recovery):
    _, _, fit = recovery
    assert fit.aic == 2 * fit.n_params - 2 * fit.log_likelihood
    ll, a = glm.log_likelihood_and_aic(fit)
    assert ll == pytest.approx(fit.log_likelihood, rel=1e-12)
    assert a == 2 * fit.n_params - 2 * ll


def test_saturated_log_likelihood():
    y = [1, 2, 3, 7, 0]
    expected = sum(v * math.log(v) - v - math.lgamma(v + 1) if v else 0.0 for v in y)
    assert glm.poisson_log_likelihood(y, [max(v, 1e-300) for v in y]) == pytest.approx(expected, rel=1e-13)
    assert glm.poisson_deviance(np.array(y, float), np.array(y, float) + 0.0) == 0.0


# -- standard errors ------------------------------------------------------------------------


def test_negative_variance_is_reported(recovery):
    _, _, fit = recovery
    cov = np.array(fit.cov)
    cov[3, 3] = -1.0
    with pytest.raises(NumericalError, match="negative variance"):
        glm.standard_errors(replace(fit, cov=cov))


def test_near_singular_flag(recovery):
    _, _, fit = recovery
    with pytest.warns(glm.NearSingularWarning):
        glm.standard_errors(replace(fit, condition_number=1e12))
    assert glm.fit_report(replace(fit, condition_number=1e12))["near_singular"] is True


# -- prediction ---------------------------------------------------------------------------------


def test_training_rows_predict_fitted(recovery):
    _, panel, fit = recovery
    pred = glm.predict(fit, panel)
    np.testing.assert_allclose(pred.mu, fit.fitted, rtol=1e-12)
    X = fit.design.X
    se = np.sqrt(np.einsum("ij,jk,ik->i", X, fit.cov, X))
    np.testing.assert_allclose(pred.se_eta, se, rtol=1e-12)


def test_population_scales_prediction(recovery):
    _, panel, fit = recovery
    row = panel[10]
    a, b = glm.predict(fit, [row, replace(row, population=2 * row.population)]).mu
    assert b / a == pytest.approx(2.0, rel=1e-12)


def test_cluster_ratio_is_exp_coefficient(recovery):
    _, panel, fit = recovery
    row = panel[5]
    ref = replace(row, cluster_lag={1: 1})
    other = replace(row, cluster_lag={1: 3})
    mu = glm.predict(fit, [ref, other]).mu
    assert mu[1] / mu[0] == pytest.approx(math.exp(fit.coef[fit.index("factor(cluster.lag1)3")]), rel=1e-12)


def test_unseen_level_rejected(recovery):
    _, panel, fit = recovery
    with pytest.raises(DataError, match="not seen"):
        glm.predict(fit, [replace(panel[0], state="WY")])
    with pytest.raises(DataError, match="not seen"):
        glm.predict(fit, [replace(panel[0], cluster_lag={1: 9})])


def test_with_coefficients(recovery):
    _, _, fit = recovery
    name = "factor(cluster.lag1)2"
    alt = fit.with_coefficients({name: 0.0})
    assert alt.coef[alt.index(name)] == 0.0
    assert alt.log_likelihood < fit.log_likelihood
    assert alt.aic == 2 * alt.n_params - 2 * alt.log_likelihood
    with pytest.raises(KeyError):
        fit.with_coefficients({"nope": 1.0})


# -- reports -----------------------------------------------------------------------------------


def test_reports(recovery):
    _, _, fit = recovery
    buf = io.StringIO()
    glm.write_fit_report(fit, buf)
    report = json.loads(buf.getvalue())
    assert report["n_params"] == len(report["coefficients"]) == fit.n_params
    assert report["aic"] == fit.aic and report["n_used"] == fit.n_used
    assert report["convergence_trace"][-1] == fit.deviance
    row = report["coefficients"][fit.index("GenderMale")]
    assert row["z"] == pytest.approx(row["estimate"] / row["std_error"])
    buf = io.StringIO()
    glm.write_coefficient_table(fit, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "term,estimate,std_error,z"
    assert lines[1].startswith("(Intercept),")
    assert any(line.startswith("factor(cluster.lag1)2,") for line in lines)
