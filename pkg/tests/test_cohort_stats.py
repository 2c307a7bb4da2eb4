import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import special, stats

from shiftwell import distributions as dist
from shiftwell.cohort_stats import (anova_tukey, chi_square, compare_groups, format_report,
                                    label_correlation_matrix, mann_whitney_u, normality_gate,
                                    pearson_r, welch_t)
from shiftwell.errors import (DegenerateGroups, DegenerateVariance, InsufficientRows, SingleGroup,
                              TooFewSamples, ZeroExpected)
from shiftwell.schema import LABELS

REF = json.loads((Path(__file__).parent / "fixtures" / "stats_reference.json").read_text())


# --- recorded reference fixtures ------------------------------------------------

@pytest.mark.parametrize("case", REF["welch_t"])
def test_welch_matches_reference(case):
    res = welch_t(case["a"], case["b"])
    assert res.statistic == pytest.approx(case["t"], abs=1e-6)
    assert res.p_value == pytest.approx(case["p"], abs=1e-6)
    assert res.df == pytest.approx(case["df"], abs=1e-6)


@pytest.mark.parametrize("case", REF["mann_whitney_u"])
def test_mann_whitney_matches_reference(case):
    res = mann_whitney_u(case["a"], case["b"])
    assert res.statistic == pytest.approx(case["u"], abs=1e-6)
    assert res.p_value == pytest.approx(case["p"], abs=1e-6)


@pytest.mark.parametrize("case", REF["chi_square"])
def test_chi_square_matches_reference(case):
    res = chi_square(case["table"])
    assert res.statistic == pytest.approx(case["stat"], abs=1e-6)
    assert res.p_value == pytest.approx(case["p"], abs=1e-6)
    assert res.df == case["df"]


@pytest.mark.parametrize("case", REF["pearson"])
def test_pearson_matches_reference(case):
    r, p, r2 = pearson_r(case["x"], case["y"])
    assert r == pytest.approx(case["r"], abs=1e-6)
    assert p == pytest.approx(case["p"], abs=1e-6)
    assert r2 == pytest.approx(r * r, abs=0)


@pytest.mark.parametrize("case", REF["anova_tukey"])
def test_anova_tukey_matches_reference(case):
    res = anova_tukey({f"g{i}": np.array(g) for i, g in enumerate(case["groups"])})
    assert res.f == pytest.approx(case["f"], abs=1e-6)
    assert res.p_value == pytest.approx(case["p"], abs=1e-6)
    np.testing.assert_allclose(res.tukey_p, np.array(case["tukey_p"]), atol=1e-3, rtol=0)


# --- trivial identities ---------------------------------------------------------

def test_welch_identical_groups():
    a = np.arange(1.0, 11.0)
    res = welch_t(a, a)
    assert res.statistic == 0.0 and res.p_value == 1.0
    shuffled = np.random.default_rng(0).permutation(a)
    assert welch_t(a, shuffled).statistic == 0.0


def test_welch_equals_pooled_t_for_equal_sizes_and_variances():
    a = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    b = a + 1.5
    pooled = stats.ttest_ind(a, b, equal_var=True)
    assert welch_t(a, b).statistic == pytest.approx(pooled.statistic, abs=1e-12)


def test_welch_errors():
    with pytest.raises(DegenerateVariance):
        welch_t([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(TooFewSamples):
        welch_t([1.0], [2.0, 3.0])


def test_mann_whitney_identities():
    assert mann_whitney_u([1, 2, 3], [4, 5, 6]).statistic == 0.0
    a = np.arange(8.0)
    assert mann_whitney_u(a, a).statistic == 32.0
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.integers(0, 5, rng.integers(1, 30)).astype(float)
        y = rng.integers(0, 5, rng.integers(1, 30)).astype(float)
        res = mann_whitney_u(x, y)
        assert res.statistic + res.summaries["u_b"] == len(x) * len(y)
        assert 0.0 <= res.p_value <= 1.0


def test_chi_square_examples():
    res = chi_square([[10, 20], [5, 10]])
    assert res.statistic == pytest.approx(0.0, abs=1e-12) and res.p_value == pytest.approx(1.0)
    res = chi_square([[10, 0], [0, 10]])
    assert res.statistic == pytest.approx(20.0, abs=1e-12) and res.df == 1
    with pytest.raises(ZeroExpected):
        chi_square([[0, 0], [3, 4]])


def test_chi_square_permutation_invariance():
    t = np.array([[12, 5, 9], [3, 14, 8]])
    a = chi_square(t).statistic
    assert chi_square(t[::-1]).statistic == pytest.approx(a, abs=1e-12)
    assert chi_square(t[:, [2, 0, 1]]).statistic == pytest.approx(a, abs=1e-12)


def test_pearson_examples():
    x = np.arange(10.0)
    r, p, r2 = pearson_r(x, 2 * x + 3)
    assert r == 1.0 and r2 == 1.0
    r, _, _ = pearson_r([1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0])
    assert r == 0.0
    with pytest.raises(DegenerateVariance):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(TooFewSamples):
        pearson_r([1.0, 2.0], [1.0, 2.0])


def test_normality_gate():
    rng = np.random.default_rng(12)
    assert normality_gate(rng.normal(size=500)) == "normal"
    assert normality_gate(rng.exponential(size=200)) == "non_normal"
    with pytest.raises(TooFewSamples):
        normality_gate(rng.normal(size=7))


def test_anova_examples():
    g = np.array([1.0, 2.0, 3.0, 4.0])
    res = anova_tukey({"a": g, "b": g, "c": g})
    assert res.f == 0.0 and not res.significant().any()
    rng = np.random.default_rng(0)
    sep = {str(m): m + rng.normal(0, 0.01, 6) for m in (0.0, 10.0, 20.0)}
    res = anova_tukey(sep)
    off = ~np.eye(3, dtype=bool)
    assert res.significant()[off].all()
    with pytest.raises(DegenerateGroups):
        anova_tukey({"a": [1.0], "b": [2.0, 3.0]})


# --- distribution functions -----------------------------------------------------

def test_distribution_functions_against_scipy_special():
    for a, b, x in [(0.5, 0.5, 0.3), (2.0, 3.5, 0.71), (30.0, 0.5, 0.95), (80.0, 120.0, 0.4)]:
        assert dist.betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-10)
    for a, x in [(0.5, 0.2), (3.0, 2.5), (12.0, 20.0), (50.0, 45.0)]:
        assert dist.gammainc(a, x) == pytest.approx(special.gammainc(a, x), abs=1e-10)
        assert dist.gammaincc(a, x) == pytest.approx(special.gammaincc(a, x), abs=1e-10)
    assert dist.t_sf_two_sided(2.1, 13.0) == pytest.approx(2 * stats.t.sf(2.1, 13), abs=1e-10)
    assert dist.chi2_sf(7.3, 3) == pytest.approx(stats.chi2.sf(7.3, 3), abs=1e-10)
    assert dist.f_sf(3.2, 2, 27) == pytest.approx(stats.f.sf(3.2, 2, 27), abs=1e-10)
    assert dist.studentized_range_sf(3.5, 3, 27) == pytest.approx(
        stats.studentized_range.sf(3.5, 3, 27), abs=1e-6)


# --- label correlations and the cohort report -----------------------------------

def test_label_correlation_matrix_properties(bundle):
    corr = label_correlation_matrix(bundle.labels)
    assert np.allclose(corr.r, corr.r.T) and np.all(np.diag(corr.r) == 1.0)
    assert np.linalg.eigvalsh(corr.r).min() > -1e-9
    r2 = corr.r2
    i = {k: LABELS.index(k) for k in LABELS}
    alert = [r2[i["alertness"], i[k]] for k in LABELS if k != "alertness"]
    assert all(0.09 <= v <= 0.38 for v in alert)
    others = [k for k in LABELS if k != "alertness"]
    assert all(r2[i[a], i[b]] > 0.45 for a in others for b in others if a != b)
    assert r2[i["happiness"], i["stress"]] == pytest.approx(0.70, abs=0.10)


def test_label_correlation_matrix_edge_cases():
    col = np.arange(5.0)
    assert np.all(label_correlation_matrix(np.column_stack([col] * 5)).r == 1.0)
    with pytest.raises(InsufficientRows):
        label_correlation_matrix(np.ones((2, 5)))


def _with_roles(bundle):
    feats = bundle.features.copy()
    roles = dict(zip(bundle.participants["participant_id"], bundle.participants["role"]))
    feats["role"] = feats["participant_id"].map(roles)
    return feats


def test_compare_groups_on_cohort(bundle):
    report = compare_groups(_with_roles(bundle))
    hr = report[report["feature"] == "hr_mean"].iloc[0]
    assert hr["p_value"] < 0.05
    nurse_mean = float(hr["nurse"].split()[0])
    doctor_mean = float(hr["doctor"].split()[0])
    assert doctor_mean < nurse_mean
    assert report["p_value"].dropna().between(0, 1).all()
    assert "hr_mean" in format_report(report)


def test_compare_groups_role_shuffle_rarely_significant(bundle):
    feats = _with_roles(bundle)
    planted = ["sleep_regularity", "sleep_efficiency", "steps_total", "entropy_active"]
    rng = np.random.default_rng(0)
    hits = 0
    n_shuffles = 20
    for _ in range(n_shuffles):
        shuffled = feats.copy()
        shuffled["role"] = rng.permutation(shuffled["role"].to_numpy())
        rep = compare_groups(shuffled)
        p = rep[rep["feature"].isin(planted)]["p_value"]
        hits += bool((p < 0.001).any())
    assert hits <= 0.05 * n_shuffles


def test_compare_groups_single_role(bundle):
    feats = _with_roles(bundle)
    with pytest.raises(SingleGroup):
        compare_groups(feats[feats["role"] == "nurse"])


def test_p_values_symmetric_in_group_order():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=20), rng.normal(0.5, 1, 25)
    assert welch_t(a, b).p_value == pytest.approx(welch_t(b, a).p_value, abs=1e-15)
    assert welch_t(a, b).statistic == -welch_t(b, a).statistic
    assert mann_whitney_u(a, b).p_value == pytest.approx(mann_whitney_u(b, a).p_value, abs=1e-15)
    assert not math.isnan(pd.Series([welch_t(a, b).p_value]).iloc[0])
