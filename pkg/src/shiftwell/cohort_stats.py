"""Group comparison statistics: Welch t, Mann-Whitney U, chi-square,
Pearson correlation, one-way ANOVA with Tukey HSD, and the nurse/doctor
feature comparison table built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats as _sps

from .distributions import (chi2_sf, f_sf, normal_sf, studentized_range_sf,
                            t_sf_two_sided)
from .errors import (DegenerateGroups, DegenerateVariance, InsufficientRows,
                     SingleGroup, TooFewSamples, ZeroExpected)
from .schema import LABELS, ROLES, SCHEMA, FeatureSchema

ALPHA = 0.05


@dataclass
class GroupSample:
    label: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class TestResult:
    test: str
    statistic: float
    p_value: float
    df: float = math.nan
    summaries: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class


def _as_array(x) -> np.ndarray:
    if isinstance(x, GroupSample):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _summary(x: np.ndarray) -> dict:
    return {"n": len(x), "mean": float(np.mean(x)),
            "sd": float(np.std(x, ddof=1)) if len(x) > 1 else math.nan}


def welch_t(a, b) -> TestResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    a, b = _as_array(a), _as_array(b)
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples("Welch t-test needs at least 2 observations per group")
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    if va == 0 and vb == 0:
        raise DegenerateVariance("both groups have zero variance")
    sa, sb = va / len(a), vb / len(b)
    se2 = sa + sb
    t = float((np.mean(a) - np.mean(b)) / math.sqrt(se2))
    df = se2 ** 2 / (sa ** 2 / (len(a) - 1) + sb ** 2 / (len(b) - 1))
    return TestResult("welch_t", t, t_sf_two_sided(t, df), float(df),
                      {"a": _summary(a), "b": _summary(b)})


def _midranks(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks (1-based) and the sizes of tie groups."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    boundaries = np.flatnonzero(np.diff(sx) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(x)]))
    ranks = np.empty(len(x))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks, ends - starts


def mann_whitney_u(a, b) -> TestResult:
    """Mann-Whitney U of ``a`` with a tie- and continuity-corrected normal
    approximation for the two-sided p-value."""
    a, b = _as_array(a), _as_array(b)
    na, nb = len(a), len(b)
    if na < 1 or nb < 1:
        raise TooFewSamples("Mann-Whitney U needs at least one observation per group")
    ranks, ties = _midranks(np.concatenate([a, b]))
    u_a = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    n = na + nb
    mu = na * nb / 2.0
    tie_term = float(np.sum(ties ** 3 - ties))
    var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        p = 1.0
    else:
        z = (abs(u_a - mu) - 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * normal_sf(z))
    return TestResult("mann_whitney_u", u_a, p, math.nan,
                      {"a": _summary(a), "b": _summary(b), "u_b": na * nb - u_a})


def chi_square(table) -> TestResult:
    """Pearson chi-square test of independence (no continuity correction)."""
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or min(obs.shape) < 2:
        raise ValueError("contingency table must be at least 2 x 2")
    if np.any(obs < 0):
        raise ValueError("counts must be non-negative")
    expected = obs.sum(axis=1, keepdims=True) * obs.sum(axis=0, keepdims=True) / obs.sum()
    if np.any(expected <= 0):
        raise ZeroExpected("a row or column of the table sums to zero")
    stat = float(np.sum((obs - expected) ** 2 / expected))
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return TestResult("chi_square", stat, chi2_sf(stat, df), float(df))


def pearson_r(x, y) -> tuple[float, float, float]:
    """Pearson r, two-sided p via the t transform, and r squared."""
    x, y = _as_array(x), _as_array(y)
    if len(x) != len(y):
        raise ValueError("x and y must have equal length")
    n = len(x)
    if n < 3:
        raise TooFewSamples("Pearson correlation needs at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("zero variance in correlation input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = t_sf_two_sided(t, n - 2)
    return r, p, r * r


def normality_gate(x, alpha: float = ALPHA) -> str:
    """Route a sample to 'normal' or 'non_normal' with Shapiro-Wilk."""
    x = _as_array(x)
    x = x[~np.isnan(x)]
    if len(x) < 8:
        raise TooFewSamples(f"normality check needs at least 8 values, got {len(x)}")
    if np.ptp(x) == 0:
        return "non_normal"
    return "normal" if _sps.shapiro(x).pvalue >= alpha else "non_normal"


@dataclass
class AnovaTukeyResult:
    f: float
    p_value: float
    df_between: int
    df_within: int
    labels: list[str]
    means: np.ndarray
    tukey_p: np.ndarray  # symmetric, unit diagonal

    def significant(self, alpha: float = ALPHA) -> np.ndarray:
        return self.tukey_p < alpha


def anova_tukey(groups: Sequence[GroupSample] | Mapping[str, Sequence[float]]) -> AnovaTukeyResult:
    """One-way ANOVA and Tukey HSD (Tukey-Kramer for unequal sizes)."""
    if isinstance(groups, Mapping):
        groups = [GroupSample(k, v) for k, v in groups.items()]
    if len(groups) < 2:
        raise DegenerateGroups("need at least two groups")
    arrays = [g.values for g in groups]
    if any(len(a) < 2 for a in arrays):
        raise DegenerateGroups("every group needs at least two observations")
    k = len(arrays)
    ns = np.array([len(a) for a in arrays], dtype=np.float64)
    n = ns.sum()
    means = np.array([a.mean() for a in arrays])
    grand = np.concatenate(arrays).mean()
    ss_between = float(np.sum(ns * (means - grand) ** 2))
    ss_within = float(sum(np.sum((a - a.mean()) ** 2) for a in arrays))
    df_b, df_w = k - 1, int(n - k)
    ms_within = ss_within / df_w
    if ms_within == 0:
        raise DegenerateGroups("all groups have zero within-group variance")
    f = (ss_between / df_b) / ms_within
    p = f_sf(f, df_b, df_w)
    tukey = np.ones((k, k))
    for i, j in combinations(range(k), 2):
        q = abs(means[i] - means[j]) / math.sqrt(ms_within / 2.0 * (1 / ns[i] + 1 / ns[j]))
        tukey[i, j] = tukey[j, i] = studentized_range_sf(q, k, df_w)
    return AnovaTukeyResult(f, p, df_b, df_w, [g.label for g in groups], means, tukey)


@dataclass
class CorrelationMatrix:
    labels: tuple[str, ...]
    r: np.ndarray
    p: np.ndarray

    @property
    def r2(self) -> np.ndarray:
        return self.r ** 2


def label_correlation_matrix(labels: pd.DataFrame | np.ndarray,
                             names: Sequence[str] = LABELS) -> CorrelationMatrix:
    arr = labels[list(names)].to_numpy(dtype=np.float64) if isinstance(labels, pd.DataFrame) \
        else np.asarray(labels, dtype=np.float64)
    arr = arr[~np.isnan(arr).any(axis=1)]
    if len(arr) < 3:
        raise InsufficientRows(f"need at least 3 complete label rows, got {len(arr)}")
    k = arr.shape[1]
    r = np.eye(k)
    p = np.zeros((k, k))
    for i, j in combinations(range(k), 2):
        if np.array_equal(arr[:, i], arr[:, j]):
            rij, pij = 1.0, 0.0
        else:
            rij, pij, _ = pearson_r(arr[:, i], arr[:, j])
        r[i, j] = r[j, i] = rij
        p[i, j] = p[j, i] = pij
    return CorrelationMatrix(tuple(names), r, p)


# --- nurse vs doctor comparison table ----------------------------------------

CATEGORICAL = {
    "wake_type": ("wake_natural", "wake_alarm", "wake_other"),
    "work_shift": ("work_shift1", "work_shift2", "work_shift3"),
}
ORDINAL_AS_CATEGORICAL = {"time_to_fall_asleep_bin": 6, "alcohol_or_drug": 2}

REPORT_COLUMNS = ["feature", "level", "kind", "nurse", "doctor", "test",
                  "statistic", "df", "p_value"]


def _fmt_mean_sd(x: np.ndarray) -> str:
    return f"{np.mean(x):.2f} ({np.std(x, ddof=1):.2f})" if len(x) > 1 else f"{np.mean(x):.2f}"


def compare_groups(features: pd.DataFrame, roles: Mapping[str, str] | None = None,
                   schema: FeatureSchema = SCHEMA) -> pd.DataFrame:
    """Nurse vs doctor comparison of every schema feature.

    ``features`` holds one row per participant-day with a ``role`` column
    (or ``roles`` maps participant_id to role). Numeric features go through
    the normality gate to Welch or Mann-Whitney; categorical ones are
    compared with chi-square on their level counts.
    """
    df = features.copy()
    if roles is not None:
        df["role"] = df["participant_id"].map(roles)
    present = [r for r in ROLES if (df["role"] == r).any()]
    if len(present) < 2:
        raise SingleGroup("both nurses and doctors are required")
    nurse = df[df["role"] == "nurse"]
    doctor = df[df["role"] == "doctor"]
    rows = []
    onehot = {m for g in CATEGORICAL.values() for m in g}

    for name in schema.names:
        if name in onehot or name in ORDINAL_AS_CATEGORICAL:
            continue
        a = nurse[name].dropna().to_numpy(dtype=np.float64)
        b = doctor[name].dropna().to_numpy(dtype=np.float64)
        row = {"feature": name, "level": "", "kind": "numeric",
               "nurse": _fmt_mean_sd(a) if len(a) else "",
               "doctor": _fmt_mean_sd(b) if len(b) else ""}
        try:
            gate_normal = (normality_gate(a) == "normal" and normality_gate(b) == "normal")
            res = welch_t(a, b) if gate_normal else mann_whitney_u(a, b)
            row.update(test=res.test, statistic=res.statistic, df=res.df, p_value=res.p_value)
        except (TooFewSamples, DegenerateVariance):
            row.update(test="none", statistic=math.nan, df=math.nan, p_value=math.nan)
        rows.append(row)

    def categorical_rows(name, levels, counts_n, counts_d):
        table = np.array([counts_n, counts_d], dtype=np.float64)
        keep = table.sum(axis=0) > 0
        try:
            res = chi_square(table[:, keep])
            test, stat, dof, p = res.test, res.statistic, res.df, res.p_value
        except (ZeroExpected, ValueError):
            test, stat, dof, p = "none", math.nan, math.nan, math.nan
        tn, td = max(table[0].sum(), 1), max(table[1].sum(), 1)
        for lvl, cn, cd in zip(levels, counts_n, counts_d):
            rows.append({"feature": name, "level": lvl, "kind": "categorical",
                         "nurse": f"{100 * cn / tn:.1f}%", "doctor": f"{100 * cd / td:.1f}%",
                         "test": test, "statistic": stat, "df": dof, "p_value": p})

    for group, members in CATEGORICAL.items():
        def counts(part):
            sub = part[list(members)].dropna()
            return [int(sub[m].sum()) for m in members]
        categorical_rows(group, [m.split("_", 1)[1] for m in members], counts(nurse), counts(doctor))
    for name, n_levels in ORDINAL_AS_CATEGORICAL.items():
        def counts(part):
            v = part[name].dropna().astype(int)
            return [int((v == lvl).sum()) for lvl in range(n_levels)]
        categorical_rows(name, [str(l) for l in range(n_levels)], counts(nurse), counts(doctor))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def format_report(report: pd.DataFrame) -> str:
    """Aligned plain-text rendering of a comparison table."""
    cells = [REPORT_COLUMNS]
    for row in report.itertuples(index=False):
        cells.append([
            row.feature, row.level, row.kind, row.nurse, row.doctor, row.test,
            "" if pd.isna(row.statistic) else f"{row.statistic:.4g}",
            "" if pd.isna(row.df) else f"{row.df:.4g}",
            "" if pd.isna(row.p_value) else f"{row.p_value:.3g}",
        ])
    widths = [max(len(str(c[i])) for c in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip() for line in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
