import numpy as np
import pandas as pd
import pytest

from runstop import timeline, units
from runstop.timeline import GameTimeline, VegasLine


def make_timeline(break_times, break_deltas, timeouts=(), vegas="default", game_id="g1"):
    if vegas == "default":
        vegas = VegasLine(spread=2.0, over_under=215.0, moneyline_home=-140.0, moneyline_away=120.0)
    to_t = np.asarray([t for t, _ in timeouts], dtype=float)
    to_s = np.asarray([s for _, s in timeouts], dtype=int)
    order = np.argsort(to_t)
    return GameTimeline(
        game_id=game_id,
        home_team="HOM",
        away_team="AWY",
        season="s1",
        game_date="2018-01-05",
        break_times=np.asarray(break_times, dtype=float),
        break_deltas=np.asarray(break_deltas, dtype=int),
        play_times=np.asarray(break_times, dtype=float),
        timeout_times=to_t[order],
        timeout_sides=to_s[order],
        vegas=vegas,
    )


class TestClassifyPlay:
    def test_post_window_truncated_at_period_end(self):
        tl = make_timeline([], [])
        status, reason = units.classify_play(11.5, s=9, tl=tl, window=2.0)
        assert status == "excluded" and reason == "window_truncated"

    def test_pre_window_truncated_at_period_start(self):
        tl = make_timeline([], [])
        status, reason = units.classify_play(13.0, s=9, tl=tl, window=2.0)
        assert status == "excluded" and reason == "window_truncated"

    def test_boundary_touching_windows_allowed(self):
        tl = make_timeline([], [])
        assert units.classify_play(14.0, s=9, tl=tl, window=2.0)[0] == "control"
        assert units.classify_play(11.0, s=9, tl=tl, window=2.0)[0] == "control"

    def test_back_to_back_timeouts_exclude_later_play(self):
        # Hand-evaluated criteria table for a timeline with timeouts 30s apart.
        tl = make_timeline([], [], timeouts=[(5.0, -1), (5.5, -1)])
        status, reason = units.classify_play(5.5, s=9, tl=tl, window=2.0)
        assert status == "excluded" and reason == "pre_window_timeout"

    def test_post_window_timeout_excludes(self):
        tl = make_timeline([], [], timeouts=[(6.0, 1)])
        status, reason = units.classify_play(5.5, s=9, tl=tl, window=2.0)
        assert status == "excluded" and reason == "post_window_timeout"

    def test_treated_when_bit_side_calls_at_t(self):
        # s > 0: home on the run, BiT side is away (-1).
        tl = make_timeline([], [], timeouts=[(5.0, -1)])
        assert units.classify_play(5.0, s=9, tl=tl, window=2.0)[0] == "treated"

    def test_opposing_timeout_at_t_excluded(self):
        tl = make_timeline([], [], timeouts=[(5.0, 1)])
        status, reason = units.classify_play(5.0, s=9, tl=tl, window=2.0)
        assert status == "excluded" and reason == "opposing_timeout"

    def test_no_timeout_is_control(self):
        tl = make_timeline([], [])
        assert units.classify_play(5.0, s=-9, tl=tl, window=2.0)[0] == "control"


def test_possession_hand_trace():
    # 20-event script with a hand-labeled possession chain.
    script = [
        # (kind, team, expected possession side after the event)
        ("other", "none", 0),
        ("made_shot", "home", -1),
        ("missed_shot", "away", -1),
        ("rebound", "home", 1),
        ("made_shot", "home", -1),
        ("turnover", "away", 1),
        ("missed_shot", "home", 1),
        ("rebound", "away", -1),
        ("foul", "home", -1),
        ("free_throw", "away", 1),
        ("made_shot", "home", -1),
        ("timeout", "away", -1),
        ("missed_shot", "away", -1),
        ("rebound", "away", -1),
        ("made_shot", "away", 1),
        ("turnover", "home", -1),
        ("made_shot", "away", 1),
        ("foul", "away", 1),
        ("free_throw", "home", -1),
        ("other", "none", -1),
    ]
    rows = []
    for i, (kind, team, _) in enumerate(script):
        rows.append(
            {
                "game_id": "g1",
                "season": "s",
                "game_date": "2018-01-01",
                "period": 1,
                "t": float(i) * 0.5,
                "event_kind": kind,
                "team": team,
                "home_score": 0,
                "away_score": 0,
                "description": "",
                "source_row": i,
            }
        )
    events = pd.DataFrame(rows)
    series = units.possession_series(events)["g1"]
    for i, (_, _, want) in enumerate(script):
        assert units.possession_at(series, float(i) * 0.5) == want, script[i]


def default_runs(tl, rho=9, window=2.0):
    return timeline.detect_runs(tl, grid_step_seconds=5.0, rho=rho, window=window)


def home_run_timeline(**kw):
    # Home scores 9 straight finishing at t=5.0 (period 1, windows internal).
    times = [2.8, 3.5, 4.0, 4.5, 5.0]
    deltas = [-2, 1, 3, 6, 7]
    return make_timeline(times, deltas, **kw)


def test_build_units_covariates():
    tl = home_run_timeline(timeouts=[(5.0, -1)])
    runs = default_runs(tl)
    assert (runs["t"] == 5.0).any()
    built, excl = units.build_units(runs, {"g1": tl})
    row = built.set_index("t").loc[5.0]
    assert row["treated"] == 1
    assert row["bit_team"] == "AWY" and row["opposing_team"] == "HOM"
    assert row["run_point_total"] == 9
    assert row["run_duration"] == pytest.approx(5.0 - 3.5, abs=1e-9)
    assert row["time_left"] == pytest.approx(43.0)
    # s=+9, delta(t)=7: the BiT team trails by 7 at the end of the run and
    # led by 2 when it began.
    assert row["ssd_eor"] == -7
    assert row["ssd_bor"] == 2
    assert row["home"] == 0
    assert row["week_in_season"] == 1
    assert row["spread"] == -2.0  # BiT is away: flip the home-minus-away spread
    assert row["moneyline"] == 120.0
    assert 0.0 < row["win_probability"] < 1.0


def test_ssd_sign_algebra():
    # s(t) > 0 and delta(t) > 0 means the BiT team trails: ssd_eor < 0.
    tl = home_run_timeline()
    runs = default_runs(tl)
    built, _ = units.build_units(runs, {"g1": tl})
    at_run = built[built["t"] == 5.0].iloc[0]
    assert at_run["ssd_eor"] < 0


def test_partition_every_run_observation():
    tl = home_run_timeline(timeouts=[(4.6, -1), (9.0, 1)])
    runs = default_runs(tl)
    built, excl = units.build_units(runs, {"g1": tl})
    assert len(built) + len(excl) == len(runs)
    ids = set(built["unit_id"]) | set(excl["unit_id"])
    assert len(ids) == len(runs)


def test_ssd_identities_on_built_units():
    rng = np.random.default_rng(14)
    from oracles import random_lattice_timeline

    times, deltas = random_lattice_timeline(rng, n_breaks=50)
    tl = make_timeline(times, deltas)
    runs = default_runs(tl, rho=7)
    built, _ = units.build_units(runs, {"g1": tl})
    for rec in built.itertuples():
        s_row = runs.set_index("t").loc[rec.t, "s"]
        delta_t = timeline.score_difference(tl, rec.t)
        assert rec.ssd_bor + np.sign(s_row) * (delta_t - s_row) == 0
        assert rec.ssd_eor + np.sign(s_row) * delta_t == 0


def test_missing_vegas_excluded():
    tl = home_run_timeline(vegas=None)
    runs = default_runs(tl)
    built, excl = units.build_units(runs, {"g1": tl})
    assert len(built) == 0
    assert (excl["reason"] == "missing_vegas").all()


def test_trim_positivity():
    df = pd.DataFrame(
        {
            "unit_id": [f"u{i}" for i in range(10)],
            "moneyline": [100, -2500, 2400, 2401, -2400, 900, 3000, -100, 0, 2399],
        }
    )
    kept = units.trim_positivity(df)
    # Linear-scan reference.
    want = [u for u, m in zip(df["unit_id"], df["moneyline"]) if abs(m) <= 2400]
    assert list(kept["unit_id"]) == want

    all_ok = df[df["moneyline"].abs() <= 2400].reset_index(drop=True)
    assert units.trim_positivity(all_ok).equals(all_ok)
