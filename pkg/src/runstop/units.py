"""Turn run observations into treated/control units with full covariates.

A run play becomes a unit when its pre- and post-treatment windows stay
inside one period and contain no timeout.  A timeout at the play itself by
the team being outscored marks the unit treated; a timeout by the team on
the run is a different intervention entirely and excludes the play.  Units
with extreme moneylines are trimmed afterwards to keep treated and control
units on common support.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .propensity import AdditiveLogisticModel
from .util import TIME_EPS, period_bounds, period_of, round_time

MONEYLINE_CUTOFF = 2400.0
POST_WINDOW_MINUTES = 1.0

UNIT_COLUMNS = [
    "unit_id",
    "game_id",
    "t",
    "period",
    "treated",
    "bit_team",
    "opposing_team",
    "run_point_total",
    "run_duration",
    "time_left",
    "win_probability",
    "ssd_bor",
    "ssd_eor",
    "possession",
    "home",
    "week_in_season",
    "over_under",
    "spread",
    "moneyline",
]

# How an event hands the ball over: +1 keeps it with the acting team,
# -1 gives it to the opponent, 0 leaves the state alone.  Dead-ball cases
# (fouls, made free throws) resolve to the team that would inbound.
_POSSESSION_EFFECT = {
    "made_shot": -1,
    "missed_shot": +1,
    "rebound": +1,
    "turnover": -1,
    "foul": -1,
    "free_throw": -1,
    "timeout": 0,
    "other": 0,
}


def possession_series(events):
    """Per-game (times, sides) arrays of ball possession after each event.

    Sides are +1 home, -1 away, 0 unknown.  The state at time t is the code
    at the last recorded change at or before t.
    """
    out = {}
    ev = events.sort_values(["game_id", "period", "t", "source_row"], kind="stable")
    for gid, grp in ev.groupby("game_id", sort=False):
        times, sides = [], []
        state = 0
        for kind, team, t in zip(grp["event_kind"], grp["team"], grp["t"]):
            effect = _POSSESSION_EFFECT.get(kind, 0)
            if effect == 0 or team not in ("home", "away"):
                continue
            actor = 1 if team == "home" else -1
            new_state = actor * effect
            if new_state != state:
                state = new_state
                times.append(t)
                sides.append(state)
        out[gid] = (np.asarray(times, dtype=float), np.asarray(sides, dtype=int))
    return out


def possession_at(series, t):
    times, sides = series
    idx = np.searchsorted(times, t + TIME_EPS, side="left") - 1
    return int(sides[idx]) if idx >= 0 else 0


def classify_play(t, s, tl, window):
    """Criteria decision for one run play.

    Returns ("treated" | "control" | "excluded", reason).  The window rules:
    the pre window [t-W, t) and post window (t, t+1] must both lie inside
    the play's period and contain no timeout by either side.
    """
    period = period_of(t)
    lo, hi = period_bounds(period)
    if (t - window) - lo < -TIME_EPS or (t + POST_WINDOW_MINUTES) - hi > TIME_EPS:
        return "excluded", "window_truncated"
    if len(tl.timeouts_in(t - window, t, include_lo=True, include_hi=False)):
        return "excluded", "pre_window_timeout"
    if len(tl.timeouts_in(t, t + POST_WINDOW_MINUTES, include_lo=False, include_hi=True)):
        return "excluded", "post_window_timeout"

    bit_side = -int(np.sign(s))
    at_t = tl.timeout_side_at(t)
    if at_t == 0:
        return "control", ""
    if at_t == bit_side or at_t == 2:
        # Simultaneous timeouts by both sides still mean the outscored team
        # called one; keep it treated.
        return "treated", ""
    return "excluded", "opposing_timeout"


def _week_lookup(timelines):
    """week-in-season per game: 1 + floor(days since season start / 7)."""
    by_season = {}
    for tl in timelines.values():
        if tl.season is None or tl.game_date is None:
            continue
        d = np.datetime64(str(tl.game_date)[:10])
        by_season.setdefault(tl.season, []).append(d)
    starts = {s: min(ds) for s, ds in by_season.items()}
    weeks = {}
    for gid, tl in timelines.items():
        if tl.season is None or tl.game_date is None:
            weeks[gid] = np.nan
            continue
        days = (np.datetime64(str(tl.game_date)[:10]) - starts[tl.season]).astype(int)
        weeks[gid] = 1 + days // 7
    return weeks


def _fit_win_probability(units, timelines, seed=0):
    """In-sample smooth logistic fit of the BiT team winning the game.

    Features are the BiT-signed current margin, the time left, and the
    BiT-signed spread.  Games tied at the end of regulation carry no label
    and are skipped during fitting.
    """
    sign = np.where(units["home"] == 1, 1.0, -1.0)
    finals = units["game_id"].map(lambda g: timelines[g].final_delta).to_numpy(float)
    bit_final = sign * finals
    feats = units[["ssd_eor", "time_left", "spread"]].copy()
    labeled = bit_final != 0
    y = (bit_final > 0).astype(float)
    if labeled.sum() < 20 or len(np.unique(y[labeled])) < 2:
        base = float(y[labeled].mean()) if labeled.any() else 0.5
        return np.full(len(units), float(np.clip(base, 0.01, 0.99)))
    model = AdditiveLogisticModel.build(
        feats[labeled], continuous=["ssd_eor", "time_left", "spread"], n_knots=4
    )
    model.fit(feats[labeled], y[labeled], lam=1.0, tol=1e-8, max_iter=200,
              on_nonconvergence="fallback")
    return model.predict(feats)


def build_units(runs, timelines, events=None, possession=None, seed=0):
    """Apply the unit criteria and assemble the covariate table.

    Args:
        runs: frame from timeline.detect_runs_all.
        timelines: dict game_id -> GameTimeline (with vegas metadata).
        events: raw event frame, used to derive possession (optional if a
            precomputed possession dict is given).
        possession: optional dict from possession_series.
        seed: seed for the in-sample win-probability fit.

    Returns:
        (units, exclusions): the unit table (untrimmed) and a ledger frame
        with columns unit_id, game_id, t, reason.
    """
    if possession is None:
        possession = possession_series(events) if events is not None else {}
    weeks = _week_lookup(timelines)

    wp_external = {}
    if events is not None and "win_prob_home" in events.columns:
        for gid, grp in events.sort_values("t").groupby("game_id"):
            ok = grp["win_prob_home"].notna()
            wp_external[gid] = (
                grp.loc[ok, "t"].to_numpy(float),
                grp.loc[ok, "win_prob_home"].to_numpy(float),
            )

    rows, excl = [], []
    for rec in runs.itertuples(index=False):
        tl = timelines[rec.game_id]
        t = float(rec.t)
        unit_id = f"{rec.game_id}@{t:.6f}"
        status, reason = classify_play(t, rec.s, tl, float(rec.window))
        if status == "excluded":
            excl.append((unit_id, rec.game_id, t, reason))
            continue
        if tl.vegas is None:
            excl.append((unit_id, rec.game_id, t, "missing_vegas"))
            continue

        sgn = int(np.sign(rec.s))
        bit_is_home = sgn < 0
        delta_t = float(tl.break_deltas[np.searchsorted(tl.break_times, t + TIME_EPS) - 1]) if len(
            tl.break_times
        ) else 0.0
        ssd_eor = -sgn * delta_t
        ssd_bor = -sgn * (delta_t - rec.s)
        pos_code = possession_at(possession[rec.game_id], t) if rec.game_id in possession else 0
        bit_side = 1 if bit_is_home else -1

        wp = np.nan
        if rec.game_id in wp_external:
            wt, wv = wp_external[rec.game_id]
            i = np.searchsorted(wt, t + TIME_EPS, side="left") - 1
            home_wp = float(wv[i]) if i >= 0 else 0.5
            wp = home_wp if bit_is_home else 1.0 - home_wp

        vegas = tl.vegas
        rows.append(
            {
                "unit_id": unit_id,
                "game_id": rec.game_id,
                "t": t,
                "period": period_of(t),
                "treated": 1 if status == "treated" else 0,
                "bit_team": rec.bit_team,
                "opposing_team": rec.opposing_team,
                "run_point_total": float(rec.r),
                "run_duration": float(rec.delta_t_run),
                "time_left": round_time(48.0 - t),
                "win_probability": wp,
                "ssd_bor": ssd_bor,
                "ssd_eor": ssd_eor,
                "possession": 1 if pos_code == bit_side else 0,
                "home": 1 if bit_is_home else 0,
                "week_in_season": weeks.get(rec.game_id, np.nan),
                "over_under": vegas.over_under,
                "spread": vegas.spread if bit_is_home else -vegas.spread,
                "moneyline": vegas.moneyline_home if bit_is_home else vegas.moneyline_away,
            }
        )

    units = pd.DataFrame(rows, columns=UNIT_COLUMNS)
    exclusions = pd.DataFrame(excl, columns=["unit_id", "game_id", "t", "reason"])
    if len(units) and units["win_probability"].isna().any():
        fitted = _fit_win_probability(units, timelines, seed=seed)
        units["win_probability"] = np.where(
            units["win_probability"].isna(), fitted, units["win_probability"]
        )
    return units, exclusions


def trim_positivity(units, cutoff=MONEYLINE_CUTOFF):
    """Drop units whose moneyline exceeds the cutoff in absolute value."""
    return units[units["moneyline"].abs() <= cutoff].reset_index(drop=True)
