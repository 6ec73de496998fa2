"""End-to-end in-memory pipeline: one run definition in, one estimate out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import effects, matching, propensity, timeline, units
from .errors import ConvergenceError
from .util import derive_rng


@dataclass(frozen=True)
class PipelineParams:
    rho: int = 9
    window: float = 2.0
    grid_seconds: float = 5.0
    prop_knots: int = 10
    prop_lambda_grid: tuple = propensity.DEFAULT_LAMBDA_GRID
    prop_folds: int = 5
    match: matching.MatchConfig = field(default_factory=matching.MatchConfig)
    fitness_boots: int = 500
    balance_boots: int = 2000
    fdr_q: float = 0.05
    bootstrap_draws: int = 10_000
    permutation_draws: int = 100_000
    match_time_budget: float | None = None
    seed: int = 0

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class CellResult:
    """Everything one run definition produces."""

    params: PipelineParams
    runs: pd.DataFrame
    units: pd.DataFrame  # trimmed, scored, with outcomes
    exclusions: pd.DataFrame
    cohort: matching.MatchedCohort
    effect: effects.EffectEstimate
    naive: float
    propensity_model: propensity.PropensityModel | None
    funnel: dict
    flags: list


def score_units(trimmed, params, flags):
    """Fit the propensity model, falling back (and flagging) on
    non-convergence so a sweep cell can still report estimates."""
    try:
        pm = propensity.fit_propensity(
            trimmed,
            n_knots=params.prop_knots,
            lam_grid=params.prop_lambda_grid,
            folds=params.prop_folds,
            seed=params.seed,
            on_nonconvergence="raise",
        )
    except ConvergenceError:
        flags.append("propensity_nonconvergence")
        pm = propensity.fit_propensity(
            trimmed,
            n_knots=params.prop_knots,
            lam_grid=params.prop_lambda_grid,
            folds=params.prop_folds,
            seed=params.seed,
            on_nonconvergence="fallback",
        )
    scored = trimmed.copy()
    scored["propensity"] = pm.fitted_scores.reindex(scored["unit_id"]).to_numpy()
    return scored, pm


def run_cell(timelines, events, params):
    """Detection through estimation for one (rho, window) definition."""
    runs = timeline.detect_runs_all(
        timelines, params.grid_seconds, params.rho, params.window
    )
    if len(runs) == 0:
        raise ValueError(f"no runs detected at rho={params.rho}, window={params.window}")
    built, exclusions = units.build_units(runs, timelines, events, seed=params.seed)
    trimmed = units.trim_positivity(built)
    n_treated = int(trimmed["treated"].sum())
    if n_treated < 5 or len(trimmed) - n_treated < 5:
        raise ValueError(
            f"too few units at rho={params.rho}, window={params.window}: "
            f"{n_treated} treated / {len(trimmed) - n_treated} control"
        )

    flags = []
    scored, pm = score_units(trimmed, params, flags)

    match_cfg = dataclasses.replace(params.match, seed=params.seed)
    cohort = matching.genetic_search(
        scored, match_cfg, fitness_boots=params.fitness_boots,
        time_budget=params.match_time_budget,
    )
    if cohort.relaxed:
        flags.append("relaxed_match")

    with_outcomes = effects.attach_outcomes(scored, timelines)
    effect = effects.att(cohort, with_outcomes)
    naive = effects.naive_diff(with_outcomes)

    funnel = {
        "run_observations": int(len(runs)),
        "uncensored": int(len(runs) - (exclusions["reason"] == "window_truncated").sum()),
        "no_window_timeout": int(
            len(runs)
            - exclusions["reason"].isin(
                ["window_truncated", "pre_window_timeout", "post_window_timeout"]
            ).sum()
        ),
        "classified": int(len(built)),
        "trimmed": int(len(trimmed)),
        "treated": n_treated,
        "control": int(len(trimmed) - n_treated),
    }
    return CellResult(
        params=params,
        runs=runs,
        units=with_outcomes,
        exclusions=exclusions,
        cohort=cohort,
        effect=effect,
        naive=naive,
        propensity_model=pm,
        funnel=funnel,
        flags=flags,
    )


def pair_differences(result):
    """Treated-minus-matched-control outcomes of a cell result."""
    y = result.units.set_index("unit_id")["outcome"]
    yt = y.loc[result.cohort.treated_ids].to_numpy(float)
    yc = y.loc[result.cohort.control_ids].to_numpy(float)
    return yt - yc


def multiseed_att(timelines, events, params, n_seeds=20):
    """Re-run matching (only) under different seeds to gauge variability.

    One shared detection/unit/propensity pass; the genetic search and the
    estimate are repeated per seed.
    """
    base = run_cell(timelines, events, params)
    rows = []
    for s in range(n_seeds):
        seed = int(derive_rng(params.seed, "multiseed", s).integers(1 << 31))
        cfg = dataclasses.replace(params.match, seed=seed)
        cohort = matching.genetic_search(
            base.units, cfg, fitness_boots=params.fitness_boots,
            time_budget=params.match_time_budget,
        )
        est = effects.att(cohort, base.units)
        rows.append({"seed": seed, "att": est.att, "se": est.se})
    return pd.DataFrame(rows), base
