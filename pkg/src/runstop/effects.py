"""Outcome measurement and treatment-effect estimation on matched cohorts.

The outcome integrates the centered score difference over the minute after
the play, signed so that positive values mean the outscored team countered
the run.  The ATT is the mean treated-minus-matched-control outcome; its
standard error follows the matching-with-replacement variance estimator
(reuse-count correction plus within-arm nearest-neighbor conditional
variances).  Franchise-level effects get percentile-bootstrap intervals and
sign-flip permutation p-values, FDR-adjusted across franchises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from . import balance
from .matching import NUMERIC_MATCH_COLS
from .util import TIME_EPS, derive_rng, period_bounds, period_of

PERMUTATION_EXACT_MAX = 20
DEFAULT_PERMUTATION_DRAWS = 100_000
DEFAULT_BOOTSTRAP_DRAWS = 10_000


@dataclass
class EffectEstimate:
    att: float
    se: float
    p_value: float
    ci: tuple
    n_pairs: int
    method: str = "abadie_imbens"


def outcome(tl, t, s, length=1.0):
    """Signed integral of the centered score difference over (t, t+length].

    Computed exactly as a sum of rectangles between score changes.  Raises
    when the window crosses a period boundary; such plays must already have
    been excluded as units.
    """
    lo, hi = period_bounds(period_of(t))
    if (t + length) - hi > TIME_EPS or t - lo < -TIME_EPS:
        raise ValueError(f"post window ({t}, {t + length}] leaves the period")
    bt = np.asarray(tl.break_times, dtype=float)
    bd = np.asarray(tl.break_deltas, dtype=float)

    i0 = int(np.searchsorted(bt, t + TIME_EPS, side="left")) - 1
    base = float(bd[i0]) if i0 >= 0 else 0.0
    inside = (bt > t + TIME_EPS) & (bt < t + length - TIME_EPS)
    edges = np.concatenate([[t], bt[inside], [t + length]])
    vals = np.concatenate([[base], bd[inside]])
    integral = float(np.sum(np.diff(edges) * (vals - base)))
    return -float(np.sign(s)) * integral


def attach_outcomes(units, timelines, length=1.0):
    """Unit table with an outcome column.

    The sign of the run is recovered from the home indicator: the team on
    the run is home exactly when the BiT team is away.
    """
    ys = np.empty(len(units))
    for i, rec in enumerate(units.itertuples(index=False)):
        sgn = 1.0 if rec.home == 0 else -1.0
        ys[i] = outcome(timelines[rec.game_id], float(rec.t), sgn, length=length)
    out = units.copy()
    out["outcome"] = ys
    return out


def _pair_outcomes(cohort, units):
    y = units.set_index("unit_id")["outcome"]
    yt = y.loc[cohort.treated_ids].to_numpy(float)
    yc = y.loc[cohort.control_ids].to_numpy(float)
    return yt, yc


def _control_conditional_variances(cohort, units, control_ids):
    """sigma^2(x, 0) for the given controls via the nearest other control.

    Distances use the cohort's weights and scaling, matching the metric the
    pairs were formed under; the J=1 estimator is half the squared outcome
    gap to the nearest neighbor.
    """
    controls = units[units["treated"] == 0].sort_values("unit_id", kind="stable")
    ids = controls["unit_id"].to_numpy()
    x = controls[NUMERIC_MATCH_COLS].to_numpy(float)
    y = controls["outcome"].to_numpy(float)
    z = x @ cohort.scaling.T * np.sqrt(cohort.weights)

    pos = pd.Series(np.arange(len(ids)), index=ids)
    rows = pos.loc[control_ids].to_numpy()
    d2 = (
        np.sum(z[rows] ** 2, axis=1)[:, None]
        + np.sum(z ** 2, axis=1)[None, :]
        - 2.0 * z[rows] @ z.T
    )
    d2[np.arange(len(rows)), rows] = np.inf
    nn = d2.argmin(axis=1)
    return 0.5 * (y[rows] - y[nn]) ** 2


def att(cohort, units):
    """ATT and matching-robust standard error from a matched cohort.

    V = [sum (d_i - att)^2 + sum_j K_j (K_j - 1) sigma_j^2] / N1^2, where
    K_j counts how often control j was reused and sigma_j^2 is its
    nearest-neighbor conditional outcome variance.  With no reuse this is
    the usual paired-difference variance.
    """
    if cohort.n_pairs == 0:
        raise ValueError("empty cohort")
    yt, yc = _pair_outcomes(cohort, units)
    diffs = yt - yc
    estimate = float(diffs.mean())
    n1 = len(diffs)
    if n1 == 1:
        return EffectEstimate(estimate, np.nan, np.nan, (np.nan, np.nan), 1)

    term1 = float(np.sum((diffs - estimate) ** 2))
    reused = cohort.reuse_counts[cohort.reuse_counts >= 2]
    term2 = 0.0
    if len(reused):
        sig2 = _control_conditional_variances(cohort, units, reused.index.to_numpy())
        k = reused.to_numpy(float)
        term2 = float(np.sum(k * (k - 1.0) * sig2))
    var = (term1 + term2) / n1 ** 2
    se = float(np.sqrt(var))
    if se > 0:
        z = estimate / se
        p = float(2.0 * stats.norm.sf(abs(z)))
    else:
        p = 1.0 if estimate == 0 else 0.0
    ci = (estimate - 1.96 * se, estimate + 1.96 * se)
    return EffectEstimate(estimate, se, p, ci, n1)


def naive_diff(units):
    """Unmatched mean-outcome difference, treated minus control."""
    yt = units.loc[units["treated"] == 1, "outcome"].to_numpy(float)
    yc = units.loc[units["treated"] == 0, "outcome"].to_numpy(float)
    return float(yt.mean() - yc.mean())


def paired_permutation_test(diffs, n_draws=DEFAULT_PERMUTATION_DRAWS, seed=0,
                            exact_max=PERMUTATION_EXACT_MAX):
    """Two-sided sign-flip p-value of the mean pair difference.

    Exact enumeration of all 2^n sign patterns when n <= exact_max,
    otherwise add-one smoothed Monte Carlo with n_draws flips.
    """
    d = np.asarray(diffs, dtype=float)
    n = len(d)
    if n == 0:
        return 1.0
    t_obs = abs(d.mean())
    if t_obs == 0.0:
        return 1.0
    if n <= exact_max:
        masks = np.arange(2 ** n, dtype=np.uint32)
        bits = ((masks[:, None] >> np.arange(n, dtype=np.uint32)) & 1).astype(np.int8)
        signs = 1 - 2 * bits
        t_all = np.abs(signs @ d) / n
        return float(np.mean(t_all >= t_obs - 1e-12))
    rng = derive_rng(seed, "sign-flip")
    hits = 0
    chunk = max(1, min(n_draws, 20_000_000 // max(n, 1)))
    left = n_draws
    while left > 0:
        b = min(chunk, left)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(b, n))
        t_star = np.abs(signs @ d) / n
        hits += int(np.sum(t_star >= t_obs - 1e-12))
        left -= b
    return float((1 + hits) / (n_draws + 1))


def franchise_effects(cohort, units, n_boot=DEFAULT_BOOTSTRAP_DRAWS, q=0.05, seed=0,
                      n_draws=DEFAULT_PERMUTATION_DRAWS):
    """Per-franchise ATT over the treated units' BiT franchise.

    Point estimate is the mean pair difference within the franchise, the CI
    is a percentile bootstrap over its matched pairs, p-values come from
    paired permutation tests and are BH-adjusted across franchises.
    """
    yt, yc = _pair_outcomes(cohort, units)
    diffs = yt - yc
    bit = units.set_index("unit_id").loc[cohort.treated_ids, "bit_team"].to_numpy()

    rows = []
    for i, franchise in enumerate(sorted(pd.unique(bit))):
        d = diffs[bit == franchise]
        n_f = len(d)
        estimate = float(d.mean())
        if n_f == 1:
            lo, hi = estimate, estimate
        else:
            rng = derive_rng(seed, "franchise-boot", i)
            idx = rng.integers(0, n_f, size=(n_boot, n_f))
            means = d[idx].mean(axis=1)
            lo, hi = (float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5)))
        p_raw = paired_permutation_test(d, n_draws=n_draws, seed=seed + i)
        rows.append((franchise, estimate, lo, hi, p_raw, n_f))

    table = pd.DataFrame(
        rows, columns=["franchise", "att_f", "ci_lo", "ci_hi", "p_raw", "n_treated"]
    )
    adj, rej = balance.bh_adjust(table["p_raw"].to_numpy(), q)
    table["p_adjusted"] = adj
    table["significant"] = rej
    return table
