"""Score-difference step functions and scoring-run detection.

The score difference is represented right-continuously: its value at a
breakpoint is the post-change value, so the play at time t is part of any
run registered at t.  A run at t is the most extreme net change in the
score difference achievable from an anchor value the function held inside
the lookback window, and the run duration is the shortest lookback
realizing that change, measured to the play that first moved the score off
the anchor value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .util import REGULATION_MINUTES, TIME_EPS, lattice_times, round_time

DEFAULT_RUN_POINTS = 9
DEFAULT_WINDOW_MINUTES = 2.0


@dataclass(frozen=True)
class VegasLine:
    """Pre-game betting quantities; spread is home minus away expected margin."""

    spread: float
    over_under: float
    moneyline_home: float
    moneyline_away: float


@dataclass(frozen=True)
class GameTimeline:
    """One game's score-difference step function and play/timeout instants."""

    game_id: str
    home_team: str | None
    away_team: str | None
    season: str | None
    game_date: str | None
    break_times: np.ndarray  # strictly increasing times of score changes
    break_deltas: np.ndarray  # home-minus-away value from each break time on
    play_times: np.ndarray  # all collapsed play instants
    timeout_times: np.ndarray
    timeout_sides: np.ndarray  # +1 home, -1 away
    vegas: VegasLine | None = None

    @property
    def final_delta(self):
        return int(self.break_deltas[-1]) if len(self.break_deltas) else 0

    def timeouts_in(self, lo, hi, include_lo=True, include_hi=True):
        """Timeout instants inside an interval of game time."""
        t = self.timeout_times
        mask = (t > lo) & (t < hi)
        if include_lo:
            mask |= t == lo
        if include_hi:
            mask |= t == hi
        return t[mask]

    def timeout_side_at(self, t):
        """+1/-1 for a home/away timeout at exactly t, 2 for both, 0 for none."""
        hit = self.timeout_sides[self.timeout_times == t]
        if len(hit) == 0:
            return 0
        if len(np.unique(hit)) > 1:
            return 2
        return int(hit[0])


def build_timelines(plays, games=None):
    """Assemble per-game timelines from a cleaned play table.

    Args:
        plays: output of ingest.clean_games.
        games: optional frame indexed by game_id with home_team, away_team,
            season, game_date, spread, over_under, moneyline_home,
            moneyline_away.  Games without a row get None metadata.

    Returns:
        dict game_id -> GameTimeline.
    """
    meta = {}
    if games is not None:
        g = games.set_index("game_id") if "game_id" in games.columns else games
        meta = g.to_dict("index")

    timelines = {}
    for gid, grp in plays.groupby("game_id", sort=True):
        grp = grp.sort_values("t", kind="stable")
        t = round_time(grp["t"].to_numpy(float))
        delta = (grp["home_score"] - grp["away_score"]).to_numpy(float)

        ch = grp["is_score_change"].to_numpy(bool)
        break_times = t[ch]
        break_deltas = delta[ch].astype(int)

        to_home = grp["timeout_home"].to_numpy(bool)
        to_away = grp["timeout_away"].to_numpy(bool)
        to_mask = to_home | to_away
        timeout_times = np.concatenate([t[to_home], t[to_away]])
        timeout_sides = np.concatenate(
            [np.ones(int(to_home.sum())), -np.ones(int(to_away.sum()))]
        ).astype(int)
        order = np.argsort(timeout_times, kind="stable")

        m = meta.get(gid, {})
        vegas = None
        if m and not pd.isna(m.get("spread", np.nan)):
            vegas = VegasLine(
                spread=float(m["spread"]),
                over_under=float(m["over_under"]),
                moneyline_home=float(m["moneyline_home"]),
                moneyline_away=float(m["moneyline_away"]),
            )
        timelines[gid] = GameTimeline(
            game_id=gid,
            home_team=m.get("home_team"),
            away_team=m.get("away_team"),
            season=m.get("season"),
            game_date=m.get("game_date"),
            break_times=break_times,
            break_deltas=break_deltas,
            play_times=t,
            timeout_times=timeout_times[order],
            timeout_sides=timeout_sides[order],
            vegas=vegas,
        )
        del to_mask
    return timelines


def step_value(break_times, break_deltas, t):
    """Right-continuous value of the step function at time(s) t."""
    idx = np.searchsorted(break_times, t, side="right") - 1
    vals = np.where(idx >= 0, np.asarray(break_deltas, dtype=float)[np.maximum(idx, 0)], 0.0)
    return vals if np.ndim(t) else float(vals)


def score_difference(tl, t):
    """Home-minus-away score at game time t (post-change value at a play)."""
    if t < 0.0 or t > REGULATION_MINUTES:
        raise ValueError(f"t={t} outside [0, {REGULATION_MINUTES}]")
    return int(step_value(tl.break_times, tl.break_deltas, t))


def run_extremum(break_times, break_deltas, t, window):
    """Most extreme net score-difference change ending at t.

    Anchor candidates are the values the step function held at some instant
    in [t - window, t): the pre-change value at each breakpoint b in
    (t - window, t], anchored at offset t - b.  Returns (duration, signed
    change) for the anchor with the largest absolute change, taking the
    smallest duration among ties.  Returns None when the function is flat on
    the window or when the extreme change is realized by the play at t alone
    (zero duration; a single play is never a run).
    """
    hi = int(np.searchsorted(break_times, t + TIME_EPS, side="left"))
    delta_t = float(break_deltas[hi - 1]) if hi > 0 else 0.0
    # Breakpoints strictly inside (t - window, t]; the epsilon keeps a
    # breakpoint sitting exactly on the window edge out despite float error.
    lo = int(np.searchsorted(break_times, (t - window) + TIME_EPS, side="left"))
    if lo >= hi:
        return None

    best = 0.0
    best_off = None
    best_s = None
    # Latest breakpoints first, so ties keep the smallest duration.
    for k in range(hi - 1, lo - 1, -1):
        prev_val = float(break_deltas[k - 1]) if k > 0 else 0.0
        dev = abs(delta_t - prev_val)
        if dev > best:
            best = dev
            best_off = t - float(break_times[k])
            best_s = delta_t - prev_val
    if best == 0.0 or best_off is None or best_off <= 0.0:
        return None
    return best_off, int(best_s)


def run_duration(tl, t, window=DEFAULT_WINDOW_MINUTES):
    """Shortest lookback attaining the maximal net change before t, or None."""
    res = run_extremum(tl.break_times, tl.break_deltas, t, window)
    return None if res is None else res[0]


def signed_run_total(tl, t, rho=DEFAULT_RUN_POINTS, window=DEFAULT_WINDOW_MINUTES):
    """Signed net change of the run ending at t, or None below the threshold."""
    res = run_extremum(tl.break_times, tl.break_deltas, t, window)
    if res is None or abs(res[1]) < rho:
        return None
    return res[1]


def detect_runs(tl, grid_step_seconds=5.0, rho=DEFAULT_RUN_POINTS, window=DEFAULT_WINDOW_MINUTES):
    """Run observations at every play time and lattice point of one game.

    Returns a frame with columns game_id, t, delta_t_run, s, r, bit_team,
    opposing_team, rho, window.  The side on the run ("opposing") is home
    when s > 0; the side being outscored ("bit") is the other one.
    """
    lattice = lattice_times(grid_step_seconds)
    eval_times = np.unique(np.concatenate([lattice, tl.play_times]))
    eval_times = eval_times[(eval_times >= 0.0) & (eval_times <= REGULATION_MINUTES)]

    rows = []
    bt, bd = tl.break_times, tl.break_deltas
    for t in eval_times:
        res = run_extremum(bt, bd, float(t), window)
        if res is None:
            continue
        dur, s = res
        if abs(s) < rho:
            continue
        if s > 0:
            opposing, bit = tl.home_team, tl.away_team
        else:
            opposing, bit = tl.away_team, tl.home_team
        rows.append((tl.game_id, float(t), dur, s, abs(s), bit, opposing, rho, window))
    return pd.DataFrame(
        rows,
        columns=[
            "game_id",
            "t",
            "delta_t_run",
            "s",
            "r",
            "bit_team",
            "opposing_team",
            "rho",
            "window",
        ],
    )


def detect_runs_all(timelines, grid_step_seconds=5.0, rho=DEFAULT_RUN_POINTS, window=DEFAULT_WINDOW_MINUTES):
    """detect_runs across a timeline collection, concatenated."""
    frames = [
        detect_runs(tl, grid_step_seconds, rho, window)
        for _, tl in sorted(timelines.items())
    ]
    frames = [f for f in frames if len(f)]
    if not frames:
        return detect_runs_empty()
    return pd.concat(frames, ignore_index=True)


def detect_runs_empty():
    return pd.DataFrame(
        columns=["game_id", "t", "delta_t_run", "s", "r", "bit_team", "opposing_team", "rho", "window"]
    )
