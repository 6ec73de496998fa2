"""Parse raw play-by-play files, collapse events into plays, clean bad games.

The input is one row per recorded event.  Several events can share a clock
timestamp (a foul plus its free throws); those are collapsed into a single
play carrying the final score of the group and a timeout flag per side.
Games with infeasible score sequences are dropped entirely, overtime rows
and empty rows are dropped individually, and every removal is logged to a
ledger so the preparation funnel can be audited.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import IngestError, SchemaError
from .util import clock_to_minutes, round_time

EVENT_COLUMNS = [
    "game_id",
    "season",
    "game_date",
    "period",
    "clock_seconds_remaining",
    "event_kind",
    "team",
    "home_score",
    "away_score",
    "description",
]

EVENT_KINDS = {
    "made_shot",
    "missed_shot",
    "rebound",
    "foul",
    "free_throw",
    "turnover",
    "timeout",
    "other",
}

TEAM_SIDES = {"home", "away", "none"}

# A single play can legally move one side's score by at most 4 points
# (three-point make plus a technical/flagrant free throw).
MAX_SCORE_JUMP = 4

ROW_ERROR_LIMIT = 0.01


@dataclass
class ParseResult:
    """Parsed events plus per-row problems (line numbers are 1-based data rows)."""

    events: pd.DataFrame
    row_errors: list = field(default_factory=list)

    @property
    def n_events(self):
        return len(self.events)


def _coerce_row(row, line_no):
    period = int(row["period"])
    clock = float(row["clock_seconds_remaining"])
    if not np.isfinite(clock) or clock < 0:
        raise ValueError(f"clock_seconds_remaining out of range: {clock!r}")
    kind = str(row["event_kind"]).strip()
    if kind not in EVENT_KINDS:
        raise ValueError(f"unknown event_kind: {kind!r}")
    team = str(row["team"]).strip()
    if team not in TEAM_SIDES:
        raise ValueError(f"unknown team side: {team!r}")
    hs, as_ = row["home_score"], row["away_score"]
    # Empty scores are legal here; clean_games drops them with a ledger entry.
    home_score = float(hs) if hs not in ("", None) and not pd.isna(hs) else np.nan
    away_score = float(as_) if as_ not in ("", None) and not pd.isna(as_) else np.nan
    if (np.isfinite(home_score) and (home_score < 0 or home_score != int(home_score))) or (
        np.isfinite(away_score) and (away_score < 0 or away_score != int(away_score))
    ):
        raise ValueError("scores must be non-negative integers")
    return {
        "game_id": str(row["game_id"]),
        "season": str(row["season"]),
        "game_date": str(row["game_date"]),
        "period": period,
        "clock_seconds_remaining": clock,
        "event_kind": kind,
        "team": team,
        "home_score": home_score,
        "away_score": away_score,
        "description": "" if pd.isna(row.get("description")) else str(row.get("description", "")),
        "source_row": line_no,
    }


def parse_events(source, fmt="csv"):
    """Parse a CSV or JSON play-by-play file into an event table.

    Args:
        source: path, file object, or bytes/str buffer.
        fmt: "csv" or "json" (JSON is an array of objects with CSV keys).

    Returns:
        ParseResult with events sorted by (game_id, period, t, source order).

    Raises:
        SchemaError: header/keys do not match the documented schema.
        IngestError: more than 1% of data rows were unparseable.
    """
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str) and "\n" in source:
        source = io.StringIO(source)

    if fmt == "csv":
        raw = pd.read_csv(source, dtype=str, keep_default_na=False)
    elif fmt == "json":
        if hasattr(source, "read"):
            records = json.load(source)
        else:
            with open(source, "r", encoding="utf-8") as fh:
                records = json.load(fh)
        raw = pd.DataFrame(records, dtype=str) if records else pd.DataFrame(columns=EVENT_COLUMNS)
    else:
        raise SchemaError(f"unsupported format: {fmt!r}")

    missing = [c for c in EVENT_COLUMNS if c not in raw.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")

    rows, errors = [], []
    for i, row in enumerate(raw.to_dict("records")):
        line_no = i + 1
        try:
            rows.append(_coerce_row(row, line_no))
        except (ValueError, TypeError, KeyError) as exc:
            errors.append((line_no, str(exc)))

    if len(raw) > 0 and len(errors) > ROW_ERROR_LIMIT * len(raw):
        raise IngestError(
            f"{len(errors)} of {len(raw)} rows unparseable (> {ROW_ERROR_LIMIT:.0%}); "
            f"first: line {errors[0][0]}: {errors[0][1]}"
        )

    events = pd.DataFrame(rows, columns=EVENT_COLUMNS + ["source_row"])
    if len(events) == 0:
        events = events.astype({"period": int, "source_row": int})
        events["t"] = pd.Series(dtype=float)
        return ParseResult(events, errors)

    events["t"] = clock_to_minutes(events["period"].to_numpy(), events["clock_seconds_remaining"].to_numpy())
    events = events.sort_values(
        ["game_id", "period", "t", "source_row"], kind="stable"
    ).reset_index(drop=True)
    return ParseResult(events, errors)


def collapse_plays(events):
    """Collapse simultaneous events into one play per (game_id, t).

    The play keeps the score of the last scoring event in the group (an event
    whose score differs from its predecessor), or of the last event when the
    group contains no scoring event.  A side's timeout flag is set when any
    event in the group is a timeout called by that side.
    """
    cols = [
        "game_id",
        "t",
        "period",
        "home_score",
        "away_score",
        "timeout_home",
        "timeout_away",
        "is_score_change",
    ]
    if len(events) == 0:
        return pd.DataFrame(columns=cols)

    ev = events.sort_values(["game_id", "period", "t", "source_row"], kind="stable").copy()
    grp = ev.groupby("game_id", sort=False)
    prev_h = grp["home_score"].shift(1).fillna(0.0)
    prev_a = grp["away_score"].shift(1).fillna(0.0)
    scoring = (ev["home_score"] != prev_h) | (ev["away_score"] != prev_a)
    # NaN scores never count as scoring events.
    scoring &= ev["home_score"].notna() & ev["away_score"].notna()

    ev["_h_scoring"] = ev["home_score"].where(scoring)
    ev["_a_scoring"] = ev["away_score"].where(scoring)
    ev["_to_home"] = (ev["event_kind"] == "timeout") & (ev["team"] == "home")
    ev["_to_away"] = (ev["event_kind"] == "timeout") & (ev["team"] == "away")

    agg = ev.groupby(["game_id", "t"], sort=True).agg(
        period=("period", "min"),
        _h_last=("home_score", "last"),
        _a_last=("away_score", "last"),
        _h_sc=("_h_scoring", "last"),
        _a_sc=("_a_scoring", "last"),
        timeout_home=("_to_home", "any"),
        timeout_away=("_to_away", "any"),
    )
    agg["home_score"] = agg["_h_sc"].where(agg["_h_sc"].notna(), agg["_h_last"])
    agg["away_score"] = agg["_a_sc"].where(agg["_a_sc"].notna(), agg["_a_last"])
    plays = agg.reset_index()[
        ["game_id", "t", "period", "home_score", "away_score", "timeout_home", "timeout_away"]
    ]
    plays["t"] = round_time(plays["t"])

    g = plays.groupby("game_id", sort=False)
    ph = g["home_score"].shift(1).fillna(0.0)
    pa = g["away_score"].shift(1).fillna(0.0)
    plays["is_score_change"] = (
        ((plays["home_score"] != ph) | (plays["away_score"] != pa))
        & plays["home_score"].notna()
        & plays["away_score"].notna()
    )
    return plays.reset_index(drop=True)


def clean_games(plays):
    """Drop overtime plays, empty rows, and games with infeasible scores.

    A game is infeasible when, over consecutive retained plays (starting from
    an implicit 0-0 baseline), either side's score decreases or jumps by more
    than 4 points in a single play.

    Returns:
        (clean_plays, ledger) where ledger has columns game_id, reason.
    """
    ledger = []
    if len(plays) == 0:
        return plays.copy(), pd.DataFrame(columns=["game_id", "reason"])

    out = plays.copy()

    missing = out["home_score"].isna() | out["away_score"].isna()
    for gid in out.loc[missing, "game_id"].unique():
        ledger.append((gid, "empty_rows"))
    out = out[~missing]

    overtime = out["period"] > 4
    for gid in out.loc[overtime, "game_id"].unique():
        ledger.append((gid, "overtime_plays"))
    out = out[~overtime]

    bad_games = []
    for gid, g in out.groupby("game_id", sort=False):
        h = np.concatenate([[0.0], g["home_score"].to_numpy(float)])
        a = np.concatenate([[0.0], g["away_score"].to_numpy(float)])
        dh, da = np.diff(h), np.diff(a)
        if (dh < 0).any() or (da < 0).any() or (dh > MAX_SCORE_JUMP).any() or (da > MAX_SCORE_JUMP).any():
            bad_games.append(gid)
    for gid in bad_games:
        ledger.append((gid, "infeasible_score"))
    out = out[~out["game_id"].isin(bad_games)]

    out = out.reset_index(drop=True)
    out["home_score"] = out["home_score"].astype(int)
    out["away_score"] = out["away_score"].astype(int)
    ledger_df = pd.DataFrame(ledger, columns=["game_id", "reason"])
    return out, ledger_df
