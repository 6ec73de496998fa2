import io

import numpy as np
import pandas as pd
import pytest

from runstop import ingest
from runstop.errors import IngestError, SchemaError

HEADER = (
    "game_id,season,game_date,period,clock_seconds_remaining,event_kind,"
    "team,home_score,away_score,description"
)


def make_csv(rows):
    return HEADER + "\n" + "\n".join(rows) + "\n"


def test_parse_three_row_game_matches_reference_parse():
    rows = [
        "g1,2017-18,2017-10-17,1,700,made_shot,home,2,0,layup",
        "g1,2017-18,2017-10-17,1,650.5,made_shot,away,2,3,three",
        "g1,2017-18,2017-10-17,2,710,timeout,home,2,3,home timeout",
    ]
    result = ingest.parse_events(make_csv(rows))
    assert result.row_errors == []
    ev = result.events
    assert len(ev) == 3

    # Independent reference: parse each line by hand.
    expected = []
    for line in rows:
        f = line.split(",")
        period = int(f[3])
        clock = float(f[4])
        expected.append(
            {
                "game_id": f[0],
                "period": period,
                "t": round(12.0 * (period - 1) + (12.0 - clock / 60.0), 6),
                "event_kind": f[5],
                "team": f[6],
                "home_score": float(f[7]),
                "away_score": float(f[8]),
                "description": f[9],
            }
        )
    for got, want in zip(ev.to_dict("records"), expected):
        for key, val in want.items():
            assert got[key] == val, key


def test_parse_empty_file_with_header():
    result = ingest.parse_events(HEADER + "\n")
    assert result.n_events == 0
    assert list(result.events.columns)[:10] == ingest.EVENT_COLUMNS


def test_parse_missing_column_is_schema_error():
    with pytest.raises(SchemaError):
        ingest.parse_events("game_id,season\n" + "g,s\n")


def test_parse_bad_rows_collected_with_line_numbers():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,2,0,ok",
        "g1,s,2018-01-01,1,650,made_shot,home,x,0,bad score",
    ] + ["g1,s,2018-01-01,1,%d,other,none,2,0,ok" % t for t in range(100, 600, 5)]
    result = ingest.parse_events(make_csv(rows))
    assert len(result.row_errors) == 1
    assert result.row_errors[0][0] == 2


def test_parse_too_many_bad_rows_fatal():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,2,0,ok",
        "g1,s,2018-01-01,1,650,made_shot,home,x,0,bad",
        "g1,s,2018-01-01,1,640,made_shot,home,4,y,bad",
    ]
    with pytest.raises(IngestError):
        ingest.parse_events(make_csv(rows))


def test_parse_json_round_trip():
    rows = [
        {
            "game_id": "g1",
            "season": "s",
            "game_date": "2018-01-01",
            "period": 1,
            "clock_seconds_remaining": 700,
            "event_kind": "made_shot",
            "team": "home",
            "home_score": 2,
            "away_score": 0,
            "description": "",
        }
    ]
    import json

    result = ingest.parse_events(io.StringIO(json.dumps(rows)), fmt="json")
    assert result.n_events == 1
    assert result.events.loc[0, "t"] == pytest.approx(12.0 - 700 / 60.0, abs=1e-6)


def test_collapse_foul_and_free_throws_one_play():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,2,0,basket",
        "g1,s,2018-01-01,1,650,foul,home,2,0,foul",
        "g1,s,2018-01-01,1,650,free_throw,away,2,1,ft 1",
        "g1,s,2018-01-01,1,650,free_throw,away,2,2,ft 2",
    ]
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    assert len(plays) == 2
    ft_play = plays.iloc[1]
    assert ft_play["home_score"] == 2 and ft_play["away_score"] == 2
    assert bool(ft_play["is_score_change"])


def test_collapse_singleton_group_identity():
    rows = ["g1,s,2018-01-01,1,700,made_shot,home,2,0,basket"]
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    assert len(plays) == 1
    p = plays.iloc[0]
    assert p["home_score"] == 2 and p["away_score"] == 0
    assert not p["timeout_home"] and not p["timeout_away"]


def test_collapse_timeout_flags_by_side():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,2,0,basket",
        "g1,s,2018-01-01,1,700,timeout,away,2,0,away timeout",
    ]
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    assert len(plays) == 1
    assert bool(plays.iloc[0]["timeout_away"]) and not bool(plays.iloc[0]["timeout_home"])


def _random_events(rng, n_games=3):
    rows = []
    for g in range(n_games):
        h = a = 0
        t_clock = 720.0
        for _ in range(int(rng.integers(5, 40))):
            t_clock -= float(rng.integers(0, 40))
            t_clock = max(t_clock, 0.0)
            kind = rng.choice(["made_shot", "missed_shot", "rebound", "timeout", "other"])
            team = rng.choice(["home", "away", "none"])
            if kind == "made_shot":
                pts = int(rng.integers(1, 4))
                if team == "home":
                    h += pts
                elif team == "away":
                    a += pts
            rows.append(f"g{g},s,2018-01-01,1,{t_clock},{kind},{team},{h},{a},x")
    return ingest.parse_events(make_csv(rows)).events


def test_collapse_is_idempotent_and_counts_shrink():
    rng = np.random.default_rng(4)
    for _ in range(20):
        events = _random_events(rng)
        plays = ingest.collapse_plays(events)
        assert len(plays) <= len(events)
        # Re-collapsing a play table (viewed as one event per play) is a no-op.
        as_events = plays.rename(columns={})
        as_events = plays.assign(
            event_kind=np.where(plays["timeout_home"], "timeout", "other"),
            team=np.where(plays["timeout_home"], "home", "none"),
            season="s",
            game_date="2018-01-01",
            description="",
            source_row=np.arange(len(plays)),
        )
        again = ingest.collapse_plays(as_events)
        assert len(again) == len(plays)
        assert np.allclose(again["t"].to_numpy(), plays["t"].to_numpy())
        assert (again["home_score"].to_numpy() == plays["home_score"].to_numpy()).all()
        # Per-game play timestamps strictly increase.
        for _, grp in plays.groupby("game_id"):
            assert (np.diff(grp["t"].to_numpy()) > 0).all()


def test_clean_drops_game_with_score_decrease():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,2,0,ok",
        "g1,s,2018-01-01,1,650,made_shot,home,1,0,score went down",
        "g2,s,2018-01-01,1,700,made_shot,home,3,0,ok",
    ]
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    clean, ledger = ingest.clean_games(plays)
    assert set(clean["game_id"]) == {"g2"}
    assert ("g1", "infeasible_score") in list(ledger.itertuples(index=False, name=None))


def test_clean_drops_game_with_jump_over_four():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,5,0,five point play",
    ]
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    clean, _ = ingest.clean_games(plays)
    assert len(clean) == 0


def test_clean_overtime_tail_removed_regulation_kept():
    # Five-period toy game: regulation plays stay, the fifth period goes.
    rows = []
    score = 0
    for period in range(1, 6):
        for clock in (700, 300, 5):
            score += 2
            rows.append(f"g1,s,2018-01-01,{period},{clock},made_shot,home,{score},0,x")
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    clean, ledger = ingest.clean_games(plays)
    # Hand count: 4 regulation periods x 3 plays.
    assert len(clean) == 12
    assert (clean["period"] <= 4).all()
    assert clean["t"].max() <= 48.0
    assert ("g1", "overtime_plays") in list(ledger.itertuples(index=False, name=None))


def test_clean_drops_empty_score_rows():
    rows = [
        "g1,s,2018-01-01,1,700,made_shot,home,2,0,ok",
        "g1,s,2018-01-01,1,650,other,none,,,empty row",
    ]
    plays = ingest.collapse_plays(ingest.parse_events(make_csv(rows)).events)
    clean, ledger = ingest.clean_games(plays)
    assert len(clean) == 1
    assert ("g1", "empty_rows") in list(ledger.itertuples(index=False, name=None))


def test_clean_score_increments_bounded():
    rng = np.random.default_rng(11)
    events = _random_events(rng, n_games=5)
    plays = ingest.collapse_plays(events)
    clean, _ = ingest.clean_games(plays)
    for _, grp in clean.groupby("game_id"):
        h = np.concatenate([[0], grp["home_score"].to_numpy()])
        a = np.concatenate([[0], grp["away_score"].to_numpy()])
        assert ((np.diff(h) >= 0) & (np.diff(h) <= 4)).all()
        assert ((np.diff(a) >= 0) & (np.diff(a) <= 4)).all()
        assert (grp["period"] <= 4).all()
