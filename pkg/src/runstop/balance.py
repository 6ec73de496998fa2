"""Covariate balance diagnostics: standardized bias, tests, FDR control.

Numeric covariates are compared with a bootstrapped two-sample
Kolmogorov-Smirnov test (pooled resampling with replacement, which keeps
the null valid in the presence of ties), binary covariates with a t-test,
and team factors with a chi-squared test.  All p-values in a report are
adjusted together by the Benjamini-Hochberg step-up procedure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError
from .util import derive_rng

DEFAULT_KS_BOOTS = 2000
FDR_Q = 0.05

CONTINUOUS_BALANCE = [
    "run_point_total",
    "run_duration",
    "time_left",
    "win_probability",
    "ssd_bor",
    "ssd_eor",
    "week_in_season",
    "over_under",
    "spread",
    "moneyline",
]
BINARY_BALANCE = ["possession", "home"]
CATEGORICAL_BALANCE = ["bit_team", "opposing_team"]


def standardized_bias(treated_values, control_values):
    """Mean difference over the pooled standard deviation.

    Pooling is sqrt((s_t^2 + s_c^2) / 2) with sample variances; 0/0 is
    defined as 0, and a nonzero difference over a zero pooled SD is
    reported as signed infinity.
    """
    x = np.asarray(treated_values, dtype=float)
    y = np.asarray(control_values, dtype=float)
    diff = x.mean() - y.mean()
    s2x = x.var(ddof=1) if len(x) > 1 else 0.0
    s2y = y.var(ddof=1) if len(y) > 1 else 0.0
    pooled = np.sqrt((s2x + s2y) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else float(np.sign(diff) * np.inf)
    return float(diff / pooled)


def ks_statistic(x, y):
    """Two-sample KS statistic, ties handled by evaluating at pooled points."""
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    pooled = np.concatenate([x, y])
    fx = np.searchsorted(x, pooled, side="right") / len(x)
    fy = np.searchsorted(y, pooled, side="right") / len(y)
    return float(np.max(np.abs(fx - fy)))


def _ks_bootstrap_stats(pooled, n1, n2, n_boot, rng):
    """Vectorized KS statistics for n_boot pooled resamples.

    Draws index into the pre-sorted pool and sorts integer keys carrying the
    group bit, which is much cheaper than sorting float rows.
    """
    n = n1 + n2
    pooled_sorted = np.sort(np.asarray(pooled, dtype=float))
    idx = rng.integers(0, n, size=(n_boot, n)).astype(np.int64)
    key = idx * 2
    key[:, n1:] += 1  # columns past n1 belong to the second sample
    key.sort(axis=1)
    vals_sorted = pooled_sorted[key >> 1]
    in_second = (key & 1).astype(np.float64)
    cum2 = np.cumsum(in_second, axis=1) / n2
    cum1 = (np.arange(1, n + 1, dtype=np.float64) - cum2 * n2) / n1
    gap = np.abs(cum1 - cum2)
    # Only positions ending a tie group are valid ECDF evaluation points.
    valid = np.ones_like(gap, dtype=bool)
    valid[:, :-1] = vals_sorted[:, 1:] != vals_sorted[:, :-1]
    gap = np.where(valid, gap, 0.0)
    return gap.max(axis=1)


def ks_bootstrap_test(x, y, n_boot=DEFAULT_KS_BOOTS, seed=0, rng=None):
    """Bootstrap p-value for the two-sample KS statistic.

    Null draws resample the pooled values with replacement, preserving the
    two group sizes; p = (1 + #{D* >= D_obs}) / (n_boot + 1).
    """
    if n_boot < 100:
        raise ConfigError(f"ks_bootstrap_test needs n_boot >= 100, got {n_boot}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d_obs = ks_statistic(x, y)
    if rng is None:
        rng = derive_rng(seed, "ks-boot")
    pooled = np.concatenate([x, y])
    draws = _ks_bootstrap_stats(pooled, len(x), len(y), n_boot, rng)
    return float((1 + np.sum(draws >= d_obs - 1e-12)) / (n_boot + 1))


def welch_t_test(x, y):
    """Unequal-variance two-sample t-test p-value, degenerate cases handled."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.var(ddof=0) == 0.0 and y.var(ddof=0) == 0.0:
        return 1.0 if x.mean() == y.mean() else 0.0
    return float(stats.ttest_ind(x, y, equal_var=False).pvalue)


def paired_t_test(diffs):
    """One-sample t-test of matched-pair differences against zero."""
    d = np.asarray(diffs, dtype=float)
    if len(d) < 2 or d.var(ddof=0) == 0.0:
        return 1.0 if np.allclose(d, 0.0) else 0.0
    return float(stats.ttest_1samp(d, 0.0).pvalue)


def chi2_test(labels_a, labels_b, min_expected=1.0):
    """Pearson chi-squared test of two label samples; rare levels merged.

    The two sparsest levels are merged until every expected cell count is at
    least min_expected.  Returns (p_value, merged_note).
    """
    a = np.asarray(labels_a, dtype=object)
    b = np.asarray(labels_b, dtype=object)
    pooled_levels, codes = np.unique(np.concatenate([a, b]), return_inverse=True)
    k = len(pooled_levels)
    ca = np.bincount(codes[: len(a)], minlength=k).astype(float)
    cb = np.bincount(codes[len(a):], minlength=k).astype(float)
    table = np.column_stack([ca, cb])

    n_merged = 0
    while len(table) > 1:
        rows = table.sum(axis=1)
        cols = table.sum(axis=0)
        expected = np.outer(rows, cols) / table.sum()
        if expected.min() >= min_expected:
            break
        order = np.argsort(rows, kind="stable")
        i, j = order[0], order[1]
        table[j] += table[i]
        table = np.delete(table, i, axis=0)
        n_merged += 1
    if len(table) < 2 or (table.sum(axis=0) == 0).any():
        return 1.0, "all categories merged"
    p = float(stats.chi2_contingency(table, correction=False).pvalue)
    note = f"merged {n_merged} rare level(s)" if n_merged else ""
    return p, note


def bh_adjust(pvals, q=FDR_Q):
    """Benjamini-Hochberg step-up adjusted p-values and rejections.

    adjusted[i] = min over ranks j >= rank(i) of p_(j) * m / j, capped at 1;
    a hypothesis is rejected when its adjusted value is <= q.
    """
    p = np.asarray(pvals, dtype=float)
    m = len(p)
    if m == 0:
        return np.array([]), np.array([], dtype=bool)
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(ranked, 1.0)
    return adjusted, adjusted <= q


@dataclass
class BalanceReport:
    """Per-covariate balance table before and after matching."""

    table: pd.DataFrame
    fdr_q: float = FDR_Q
    notes: list = field(default_factory=list)

    def rejected_pre(self):
        return self.table.loc[self.table["rejected_pre"], "covariate"].tolist()

    def rejected_post(self):
        return self.table.loc[self.table["rejected_post"], "covariate"].tolist()

    def to_frame(self):
        return self.table.copy()


def _column_test(col, treated, control, n_boot, rng):
    if col in BINARY_BALANCE:
        return "t", welch_t_test(treated, control), ""
    if col in CATEGORICAL_BALANCE:
        p, note = chi2_test(treated, control)
        return "chi2", p, note
    return "ks_boot", ks_bootstrap_test(treated, control, n_boot=n_boot, rng=rng), ""


def group_tests(units, matched=None, n_boot=DEFAULT_KS_BOOTS, q=FDR_Q, seed=0,
                propensity_col="propensity"):
    """Balance report over all covariates plus the propensity score.

    Args:
        units: unit table with covariates (and a propensity column when
            available); pre-match comparisons are treated vs all controls.
        matched: optional (treated_frame, control_frame) of matched samples,
            row-aligned with multiplicity, for the post-match columns.

    Returns:
        BalanceReport; biases for team factors are not defined and reported
        as NaN.
    """
    cols = [propensity_col] if propensity_col in units.columns else []
    cols += CATEGORICAL_BALANCE + CONTINUOUS_BALANCE + BINARY_BALANCE
    tr = units[units["treated"] == 1]
    co = units[units["treated"] == 0]

    rows, notes = [], []
    for i, col in enumerate(cols):
        rng = derive_rng(seed, "balance", i)
        kind, p_pre, note = _column_test(col, tr[col], co[col], n_boot, rng)
        if note:
            notes.append(f"{col} (pre): {note}")
        if kind == "chi2":
            bias_pre = np.nan
        else:
            bias_pre = standardized_bias(tr[col], co[col])
        p_post, bias_post = np.nan, np.nan
        if matched is not None:
            mt, mc = matched
            rng_post = derive_rng(seed, "balance-post", i)
            if kind == "t":
                p_post = paired_t_test(mt[col].to_numpy(float) - mc[col].to_numpy(float))
            else:
                kind_post, p_post, note = _column_test(col, mt[col], mc[col], n_boot, rng_post)
                if note:
                    notes.append(f"{col} (post): {note}")
            if kind != "chi2":
                bias_post = standardized_bias(mt[col], mc[col])
        rows.append((col, kind, bias_pre, bias_post, p_pre, p_post))

    table = pd.DataFrame(
        rows, columns=["covariate", "test_kind", "bias_pre", "bias_post", "p_pre", "p_post"]
    )
    adj_pre, rej_pre = bh_adjust(table["p_pre"].to_numpy(), q)
    table["p_pre_adj"], table["rejected_pre"] = adj_pre, rej_pre
    if matched is not None:
        adj_post, rej_post = bh_adjust(table["p_post"].to_numpy(), q)
        table["p_post_adj"], table["rejected_post"] = adj_post, rej_post
    else:
        table["p_post_adj"], table["rejected_post"] = np.nan, False
    return BalanceReport(table=table, fdr_q=q, notes=notes)
