"""Sensitivity to hidden bias and to the run definition itself.

The hidden-bias analysis bounds a matched-pairs signed-rank analysis when
the odds of treatment within a pair may differ by a factor of gamma: signs
are Bernoulli with probability between 1/(1+gamma) and gamma/(1+gamma),
and point-estimate and confidence bands come from inverting the bounding
tests.  The run-definition sweep re-runs the whole pipeline over a grid of
run thresholds and window lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConvergenceError

EXACT_ENUMERATION_MAX = 20
_null_cache = {}


def _signed_rank_stat(diffs, tau0):
    """(T, ranks) for the shifted differences; zeros dropped, ties averaged."""
    e = np.asarray(diffs, dtype=float) - tau0
    e = e[e != 0.0]
    if len(e) == 0:
        return 0.0, np.array([])
    ranks = stats.rankdata(np.abs(e))
    return float(np.sum(ranks[e > 0])), ranks


def _tail_probs(ranks, p, t_obs):
    """(P(T >= t_obs), P(T <= t_obs)) for T = sum of rank_i * Bern(p).

    Exact enumeration for small n (cached per rank multiset and p), normal
    approximation otherwise.
    """
    n = len(ranks)
    if n == 0:
        return 1.0, 1.0
    if n <= EXACT_ENUMERATION_MAX:
        key = (tuple(np.round(np.sort(ranks), 9)), round(p, 12))
        if key not in _null_cache:
            bits = ((np.arange(2 ** n, dtype=np.uint32)[:, None]
                     >> np.arange(n, dtype=np.uint32)) & 1).astype(np.float64)
            support = bits @ np.sort(ranks)
            k = bits.sum(axis=1)
            probs = p ** k * (1 - p) ** (n - k)
            order = np.argsort(support, kind="stable")
            _null_cache[key] = (support[order], np.cumsum(probs[order]))
        support, cum = _null_cache[key]
        total = cum[-1]
        i_ge = np.searchsorted(support, t_obs - 1e-9, side="left")
        upper = total - (cum[i_ge - 1] if i_ge > 0 else 0.0)
        i_le = np.searchsorted(support, t_obs + 1e-9, side="right")
        lower = cum[i_le - 1] if i_le > 0 else 0.0
        return float(upper / total), float(lower / total)
    mu = p * ranks.sum()
    sd = np.sqrt(p * (1 - p) * np.sum(ranks ** 2))
    if sd == 0:
        return float(t_obs <= mu), float(t_obs >= mu)
    z = (t_obs - mu) / sd
    return float(stats.norm.sf(z)), float(stats.norm.cdf(z))


def _bisect_decreasing(indicator, lo, hi, iters=60):
    """Largest x in [lo, hi] where a decreasing boolean indicator holds."""
    if not indicator(lo):
        return lo
    if indicator(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if indicator(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _hl_estimate(diffs, p):
    """Shift solving T(d - tau) = p * sum(ranks): the rank-based estimate."""
    diffs = np.asarray(diffs, dtype=float)
    lo = float(diffs.min()) - 1.0
    hi = float(diffs.max()) + 1.0

    def above(tau):
        t, ranks = _signed_rank_stat(diffs, tau)
        return t > p * ranks.sum() if len(ranks) else False

    return _bisect_decreasing(above, lo, hi)


def rosenbaum_bounds(pair_diffs, gamma, alpha=0.05):
    """Hidden-bias bounds at one gamma.

    Returns (pe_lo, pe_hi, ci_lo, ci_hi): the attainable range of rank-based
    point estimates and the conservative (1 - alpha) confidence band under a
    treatment-assignment bias of at most gamma.  At gamma = 1 both collapse
    to the ordinary signed-rank estimate and interval.
    """
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    d = np.asarray(pair_diffs, dtype=float)
    if len(d) < 2:
        raise ValueError("need at least two pair differences")
    p_plus = gamma / (1.0 + gamma)
    p_minus = 1.0 / (1.0 + gamma)

    pe_lo = _hl_estimate(d, p_plus)
    pe_hi = _hl_estimate(d, p_minus)
    if pe_lo > pe_hi:
        pe_lo, pe_hi = pe_hi, pe_lo

    span = float(d.max() - d.min()) + 1.0
    lo0, hi0 = float(d.min()) - span, float(d.max()) + span

    def hi_ok(tau0):
        t, ranks = _signed_rank_stat(d, tau0)
        _, lower = _tail_probs(ranks, p_minus, t)
        return lower > alpha / 2.0

    def lo_ok(tau0):
        # Mirrored: indicator increasing in tau0, so bisect on the negation
        # of the reflected axis.
        t, ranks = _signed_rank_stat(d, tau0)
        upper, _ = _tail_probs(ranks, p_plus, t)
        return upper > alpha / 2.0

    ci_hi = _bisect_decreasing(hi_ok, lo0, hi0)
    ci_lo = -_bisect_decreasing(lambda x: lo_ok(-x), -hi0, -lo0)
    return float(pe_lo), float(pe_hi), float(ci_lo), float(ci_hi)


@dataclass
class SensitivityCurve:
    gammas: np.ndarray
    pe_lo: np.ndarray
    pe_hi: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    gamma_star: float
    gamma_star_flag: str = ""

    def to_frame(self):
        return pd.DataFrame(
            {
                "gamma": self.gammas,
                "pe_lo": self.pe_lo,
                "pe_hi": self.pe_hi,
                "ci_lo": self.ci_lo,
                "ci_hi": self.ci_hi,
            }
        )


def gamma_star(pair_diffs, grid_step=0.01, gamma_max=10.0, alpha=0.05):
    """Smallest gamma on the grid whose conservative CI contains zero.

    Returns (gamma, flag); flag explains the degenerate cases (CI contains
    zero already at gamma = 1, or zero never enters by gamma_max).
    """
    d = np.asarray(pair_diffs, dtype=float)
    _, _, lo1, hi1 = rosenbaum_bounds(d, 1.0, alpha=alpha)
    if lo1 <= 0.0 <= hi1:
        return 1.0, "unadjusted interval already contains zero"
    g = 1.0
    while g <= gamma_max + 1e-12:
        _, _, lo, hi = rosenbaum_bounds(d, g, alpha=alpha)
        if lo <= 0.0 <= hi:
            return float(round(g, 10)), ""
        g = round(g + grid_step, 10)
    return float(gamma_max), f"zero still outside the interval at gamma={gamma_max}"


def sensitivity_curve(pair_diffs, gammas=None, alpha=0.05, grid_step=0.01, gamma_max=10.0):
    """Bounds across a gamma grid plus the breakdown value."""
    if gammas is None:
        gammas = np.arange(1.0, 2.0 + 1e-9, 0.05)
    gammas = np.asarray(gammas, dtype=float)
    rows = [rosenbaum_bounds(pair_diffs, g, alpha=alpha) for g in gammas]
    pe_lo, pe_hi, ci_lo, ci_hi = map(np.asarray, zip(*rows))
    g_star, flag = gamma_star(pair_diffs, grid_step=grid_step, gamma_max=gamma_max, alpha=alpha)
    return SensitivityCurve(gammas, pe_lo, pe_hi, ci_lo, ci_hi, g_star, flag)


@dataclass
class SweepCell:
    rho: int
    window: float
    n_units: int = 0
    n_treated: int = 0
    n_control: int = 0
    att: float = np.nan
    se: float = np.nan
    p: float = np.nan
    flags: list = field(default_factory=list)

    def to_row(self):
        return {
            "rho": self.rho,
            "window": self.window,
            "n_units": self.n_units,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "att": self.att,
            "se": self.se,
            "p": self.p,
            "flags": ";".join(self.flags),
        }


DEFAULT_SWEEP_GRID = tuple(
    (rho, window) for rho in (7, 8, 9, 10) for window in (1.5, 2.0, 2.5, 3.0)
)


def run_definition_sweep(timelines, events, params, grid=DEFAULT_SWEEP_GRID):
    """Re-run detection through estimation for every run definition.

    Per-cell failures (no units, non-convergent propensity, relaxed match)
    are recorded in the cell flags; the sweep always completes.
    """
    from . import pipeline  # local import: pipeline drives the other modules

    cells = []
    for rho, window in grid:
        cell = SweepCell(rho=int(rho), window=float(window))
        cell_params = params.replace(rho=int(rho), window=float(window))
        try:
            result = pipeline.run_cell(timelines, events, cell_params)
        except ConvergenceError:
            cell.flags.append("propensity_nonconvergence")
            cells.append(cell)
            continue
        except ValueError as exc:
            cell.flags.append(f"failed: {exc}")
            cells.append(cell)
            continue
        cell.n_treated = int(result.units["treated"].sum())
        cell.n_control = int(len(result.units) - cell.n_treated)
        cell.n_units = int(len(result.units))
        cell.att = result.effect.att
        cell.se = result.effect.se
        cell.p = result.effect.p_value
        cell.flags.extend(result.flags)
        cells.append(cell)
    return pd.DataFrame([c.to_row() for c in cells])
