import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_table, toy_tree
from topohazard.cox import (
    ConstantCovariateWarning,
    ConvergenceError,
    MonotoneLikelihoodError,
    RankDeficiencyError,
    cox_fit,
    design_matrix,
    gradient_check,
    hazard_ratio_20_80,
    partial_loglik,
)
from topohazard.trees import EventTable, build_event_table


def table(rows):
    df = pd.DataFrame(rows, columns=["entry", "exit", "status", "x"])
    df.insert(0, "edge", [f"e{i}" for i in range(len(df))])
    df.insert(0, "tree_id", "t")
    return EventTable(df)


def test_two_edges_hand_likelihood():
    fit = cox_fit(table([(0, 1, "leaf", 0.0), (0, 2, "leaf", 1.0)]))
    assert fit.log_partial_likelihood == -np.log(2)
    assert fit.baseline.values.tolist() == [0.5, 1.5]


def test_score_at_null_single_event():
    t = table([(0, 1, "leaf", 1.0), (0, 2, "censored", 0.0), (0.5, 3, "censored", 0.0)])
    d = design_matrix(t, covariates=["x"])
    _, g, _ = partial_loglik(d, [0.0])
    assert g[0] == pytest.approx(1.0 - 1.0 / 3)


def test_delayed_entry_excludes_late_rows():
    # the third row enters after the event, so the risk set has two members
    t = table([(0, 1, "leaf", 1.0), (0, 2, "censored", 0.0), (1.5, 3, "censored", 0.0)])
    d = design_matrix(t, covariates=["x"])
    _, g, _ = partial_loglik(d, [0.0])
    assert g[0] == pytest.approx(0.5)


def test_toy_tree_partial_likelihood():
    tab = build_event_table([toy_tree()])
    fit = cox_fit(tab, "leaf")
    # events at sqrt(4.24) (risk {A-B, A-C}) and sqrt(5) (risk {A-B})
    assert fit.log_partial_likelihood == -np.log(2)
    d = design_matrix(tab, covariates=["width"])
    ll, _, _ = partial_loglik(d, [0.3])
    w = np.exp(0.3 * np.array([2.0, 3.0]))
    assert ll == pytest.approx(np.log(w[1] / w.sum()) + 0.0, abs=1e-14)


def test_breslow_vs_efron_ties():
    t = table([(0, 1, "leaf", 1.0), (0, 1, "leaf", 0.0), (0, 2, "leaf", 0.5), (0, 3, "censored", 0.2)])
    b = 0.4
    w = np.exp(b * np.array([1.0, 0.0, 0.5, 0.2]))
    s = w.sum()
    breslow = b * 1.0 - 2 * np.log(s) + b * 0.5 - np.log(w[2] + w[3])
    efron = b * 1.0 - np.log(s) - np.log(s - 0.5 * (w[0] + w[1])) + b * 0.5 - np.log(w[2] + w[3])
    # centring shifts every eta by the same constant, which cancels
    assert partial_loglik(design_matrix(t, covariates=["x"]), [b])[0] == pytest.approx(breslow)
    assert partial_loglik(design_matrix(t, covariates=["x"], ties="efron"), [b])[0] == pytest.approx(efron)


def test_single_binary_covariate_matches_grid_search():
    rng = np.random.default_rng(0)
    n = 80
    x = rng.integers(0, 2, n).astype(float)
    exit_ = rng.exponential(1 / np.exp(0.8 * x))
    status = np.where(rng.uniform(size=n) < 0.8, "leaf", "censored")
    t = table(list(zip(np.zeros(n), exit_, status, x)))
    fit = cox_fit(t, covariates=["x"])
    d = design_matrix(t, covariates=["x"])
    grid = np.linspace(fit.coefficients["x"] - 0.01, fit.coefficients["x"] + 0.01, 2001)
    best = grid[np.argmax([partial_loglik(d, [b])[0] for b in grid])]
    assert fit.coefficients["x"] == pytest.approx(best, abs=1e-4)


def test_gradient_check_at_zero_and_random():
    rng = np.random.default_rng(1)
    for _ in range(5):
        t = random_table(rng)
        cov = ["x0", "x1", "x2"]
        assert gradient_check(t, "leaf", None, cov) < 1e-6
        beta = rng.uniform(-1, 1, 3)
        assert gradient_check(t, "leaf", beta, cov) < 1e-5
        assert gradient_check(t, "branch", beta, cov, ties="efron") < 1e-5
    assert gradient_check(t, "leaf") == 0.0


def test_likelihood_non_decreasing_and_summary():
    rng = np.random.default_rng(2)
    t = random_table(rng, n=200)
    fit = cox_fit(t, covariates=["x0"], groups={"basis": ["x1", "x2"]}, factor="tree_id")
    assert np.all(np.diff(fit.trace) >= 0)
    s = fit.summary()
    assert s.loc["basis", "df"] == 2 and s.loc["tree_id", "df"] == 2
    assert np.isnan(s.loc["basis", "coef"])
    cov = fit.covariance.to_numpy()
    assert np.allclose(cov, cov.T) and np.all(np.linalg.eigvalsh(cov) > 0)
    assert (fit.hr_20_80 > 0).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(0.1, 20))
def test_location_and_scale_invariance(seed, shift, scale):
    rng = np.random.default_rng(seed)
    t = random_table(rng, n=80, p=2)
    base = cox_fit(t, covariates=["x0", "x1"])
    df = t.df.copy()
    df["x0"] = df["x0"] * scale + shift
    moved = cox_fit(EventTable(df), covariates=["x0", "x1"])
    assert moved.coefficients["x0"] == pytest.approx(base.coefficients["x0"] / scale, rel=1e-6, abs=1e-9)
    assert moved.coefficients["x1"] == pytest.approx(base.coefficients["x1"], rel=1e-6, abs=1e-9)
    assert moved.hr_20_80["x0"] == pytest.approx(base.hr_20_80["x0"], rel=1e-6)
    assert moved.log_partial_likelihood == pytest.approx(base.log_partial_likelihood, rel=1e-9)


def test_row_permutation_bit_identical():
    rng = np.random.default_rng(3)
    t = random_table(rng, n=120)
    a = cox_fit(t, covariates=["x0", "x1"], factor="tree_id")
    perm = EventTable(t.df.sample(frac=1.0, random_state=4).reset_index(drop=True))
    b = cox_fit(perm, covariates=["x0", "x1"], factor="tree_id")
    assert np.array_equal(a.coefficients.to_numpy(), b.coefficients.to_numpy())
    assert np.array_equal(a.covariance.to_numpy(), b.covariance.to_numpy())
    assert a.log_partial_likelihood == b.log_partial_likelihood
    assert np.array_equal(a.baseline.values, b.baseline.values)
    assert a.hr_20_80.equals(b.hr_20_80)


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(4)
    t = random_table(rng)
    t.df["dup"] = 2 * t.df["x0"] + 1
    with pytest.raises(RankDeficiencyError, match="dup|x0"):
        cox_fit(t, covariates=["x0", "dup"])
    t.df["const"] = 3.0
    with pytest.raises(RankDeficiencyError, match="const"):
        cox_fit(t, covariates=["const"])


def test_monotone_likelihood_detected():
    # every event has the larger covariate value than everyone still at risk
    rows = [(0, i + 1, "leaf", 10.0 - i) for i in range(6)] + [(0, 10, "censored", -5.0)]
    with pytest.raises(MonotoneLikelihoodError) as err:
        cox_fit(table(rows), covariates=["x"])
    assert "x" in err.value.columns


def test_non_convergence_reports_gradient():
    rng = np.random.default_rng(5)
    with pytest.raises(ConvergenceError, match="gradient"):
        cox_fit(random_table(rng), covariates=["x0"], max_iter=1, init=[3.0])


def test_no_events_error():
    with pytest.raises(ValueError):
        cox_fit(table([(0, 1, "censored", 0.0), (0, 2, "censored", 1.0)]), covariates=["x"])


def test_hazard_ratio_conventions():
    rng = np.random.default_rng(6)
    t = random_table(rng, n=150)
    t.df["flag"] = (rng.uniform(size=150) < 0.5).astype(float)
    fit = cox_fit(t, covariates=["x0", "flag"], factor="tree_id")
    b = fit.coefficients
    q20, q80 = np.quantile(t.df["x0"], [0.2, 0.8])
    assert fit.hr_20_80["x0"] == pytest.approx(np.exp(b["x0"] * (q80 - q20)))
    assert fit.hr_20_80["flag"] == pytest.approx(np.exp(b["flag"]))
    eff = np.array([0.0, b["tree_id[b]"], b["tree_id[c]"]])
    q20, q80 = np.quantile(eff, [0.2, 0.8])
    assert fit.hr_20_80["tree_id"] == pytest.approx(np.exp(q80 - q20))
    if b["x0"] < 0:
        assert fit.hr_20_80["x0"] < 1


def test_hazard_ratio_zero_coefficient_and_constant_quantiles():
    rng = np.random.default_rng(7)
    t = random_table(rng, n=50)
    fit = cox_fit(t, covariates=["x0"])
    fit.coefficients[:] = 0.0
    assert hazard_ratio_20_80(fit)["x0"] == 1.0
    t.df["rare"] = 0.0
    t.df.loc[0, "rare"] = 1.0
    fit = cox_fit(t, covariates=["rare"])
    with pytest.warns(ConstantCovariateWarning):
        assert hazard_ratio_20_80(fit)["rare"] == 1.0
