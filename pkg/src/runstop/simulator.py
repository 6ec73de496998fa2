"""Synthetic play-by-play seasons with a known, injectable timeout effect.

Scoring is a marked point process: exponential possession lengths and
categorical point values, with per-side scoring bursts that create runs.
A timeout's effect is injected deterministically: one extra score by a
chosen side at a fixed offset into the post-treatment minute, so the
treated-minus-untreated outcome difference is known exactly per decision
and auditable from the ground-truth ledger.

Selection into timeouts is driven only by observable covariates (run size,
duration, score context, time left), so matching on observables recovers
the injected effect while the naive contrast is confounded by burst
persistence (stronger bursts produce bigger runs and keep scoring).  A
hidden-confounding knob adds the latent burst intensity to the policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import effects
from .timeline import GameTimeline, run_extremum
from .util import derive_rng

MIN_EVENT_GAP = 0.002  # minutes between distinct play groups


@dataclass(frozen=True)
class TimeoutPolicy:
    """Probability that the outscored side calls a timeout when a run
    materializes.

    The decision is made once per run episode (at the play where the run
    criteria first hold); re-deciding at every play of an ongoing run would
    flood the post windows of continuing-run controls with timeouts and
    select the surviving controls toward dead runs.
    """

    kind: str = "logistic"  # "logistic" or "constant"
    base_rate: float = 0.30  # probability for the constant kind
    intercept: float = -1.2
    coef_run_points: float = 0.25
    coef_duration: float = -0.4
    coef_time_left: float = 0.10
    coef_ssd: float = -0.12
    hidden_coef: float = 0.0  # loads on the latent burst intensity

    def probability(self, r, duration, time_left, ssd_eor, burst_intensity):
        if self.kind == "constant":
            return self.base_rate
        eta = (
            self.intercept
            + self.coef_run_points * (r - 9.0)
            + self.coef_duration * (duration - 1.0)
            + self.coef_time_left * (time_left - 24.0) / 10.0
            + self.coef_ssd * ssd_eor
            + self.hidden_coef * burst_intensity
        )
        return float(1.0 / (1.0 + np.exp(-eta)))


CONFOUNDED_POLICY = TimeoutPolicy()
RANDOM_POLICY = TimeoutPolicy(kind="constant", base_rate=0.30)


@dataclass(frozen=True)
class SimConfig:
    n_games: int = 60
    teams: tuple = ("ANT", "BEE", "CAT", "DOG", "ELK", "FOX")
    season: str = "2024-25"
    start_date: str = "2024-10-21"
    possession_mean_minutes: float = 0.25
    base_score_prob: float = 0.47
    point_value_probs: tuple = (0.12, 0.60, 0.28)  # 1, 2, 3 points given a score
    burst_start_prob: float = 0.035
    burst_intensity_range: tuple = (1.8, 2.3)
    # A burst dies once its net swing reaches a cap drawn from this range,
    # so run instants carry almost no leftover burst drift and the
    # outcome's systematic part is the margin tilt below.
    burst_cap_range: tuple = (10, 13)
    # Per-point score-probability tilt toward the leading team, saturating
    # at lead_tilt_cap.  This is the confounding engine: it moves outcomes
    # as an exact function of the observable signed score difference.
    lead_tilt: float = 0.012
    lead_tilt_cap: float = 15.0
    noise_timeout_rate: float = 0.006
    policy: TimeoutPolicy = field(default_factory=TimeoutPolicy)
    rho: int = 9
    window: float = 2.0
    true_effect: float = 0.0  # point-minutes shift of the treated post window
    seed: int = 0

    def __post_init__(self):
        if abs(self.true_effect) > 1.0:
            raise ValueError("true_effect must lie in [-1, 1] (one extra score)")
        if self.possession_mean_minutes <= 0:
            raise ValueError("possession_mean_minutes must be positive")
        if abs(sum(self.point_value_probs) - 1.0) > 1e-9:
            raise ValueError("point_value_probs must sum to 1")


def _team_strengths(config):
    rng = derive_rng(config.seed, "strengths")
    return {team: float(rng.normal(0.0, 1.2)) for team in config.teams}


def _schedule(config):
    pairs = []
    teams = list(config.teams)
    while len(pairs) < config.n_games:
        for a in teams:
            for b in teams:
                if a != b:
                    pairs.append((a, b))
    pairs = pairs[: config.n_games]
    start = np.datetime64(config.start_date)
    span_days = 168
    out = []
    for k, (home, away) in enumerate(pairs):
        offset = 0 if config.n_games == 1 else int(k * span_days / (config.n_games - 1))
        out.append((f"sim{k:05d}", home, away, str(start + offset)))
    return out


def _vegas_line(strength_home, strength_away, rng):
    spread = strength_home - strength_away + 2.0 + float(rng.normal(0, 1.0))
    p_home = float(np.clip(0.5 + spread / 22.0, 0.03, 0.97))
    ratio = max(p_home, 1 - p_home) / min(p_home, 1 - p_home)
    ml = 100.0 * ratio
    ml_home, ml_away = (-ml, ml) if p_home >= 0.5 else (ml, -ml)
    return (
        round(spread, 1),
        round(215.0 + float(rng.normal(0, 6.0)), 1),
        float(np.clip(round(ml_home), -3500, 3500)),
        float(np.clip(round(ml_away), -3500, 3500)),
    )


class _Game:
    """Mutable per-game scratch state."""

    def __init__(self, game_id, home, away, config, strengths, rng):
        self.game_id = game_id
        self.home, self.away = home, away
        self.config = config
        self.strengths = strengths
        self.rng = rng
        self.events = []
        self.break_times = []
        self.break_deltas = []
        self.h = 0
        self.a = 0
        self.last_t = -1.0
        self.last_timeout_t = -10.0
        self.burst = {1: None, -1: None}  # side -> {"m": intensity, "net": points}
        self.run_was_active = False
        self.decisions = []
        self.pending = []  # (t_scheduled, side, points, decision_index)

    def delta(self):
        return self.h - self.a

    def emit(self, period, t, kind, team_side, scored=0, share_clock=False):
        """Append one event; returns the (possibly shifted) time or None.

        share_clock joins the current play group (rebounds, timeouts at the
        play); otherwise the event is pushed past the previous group.
        """
        t = round(t, 3)
        if share_clock:
            t = max(t, self.last_t)
        elif t <= self.last_t:
            t = round(self.last_t + MIN_EVENT_GAP, 3)
        if t > 12.0 * period - 1e-9:
            return None
        self.last_t = t
        if scored:
            if team_side == 1:
                self.h += scored
            else:
                self.a += scored
            self.break_times.append(t)
            self.break_deltas.append(self.delta())
            for side in (1, -1):
                if self.burst[side] is not None:
                    self.burst[side]["net"] += scored * (1 if side == team_side else -1)
        self.events.append(
            {
                "game_id": self.game_id,
                "period": period,
                "t": t,
                "event_kind": kind,
                "team": {1: "home", -1: "away", 0: "none"}[team_side],
                "home_score": self.h,
                "away_score": self.a,
            }
        )
        return t

    def flush_pending(self, period, before_t):
        """Emit scheduled effect injections due before before_t."""
        due = [x for x in self.pending if x[0] <= before_t]
        for item in due:
            t_sched, side, pts, idx = item
            landed = self.emit(period, t_sched, "free_throw", side, scored=pts)
            self.decisions[idx]["injection_landed_t"] = landed
            self.pending.remove(item)

    def score_prob(self, side, t):
        team = self.home if side == 1 else self.away
        base = self.config.base_score_prob + 0.015 * self.strengths[team]
        if self.burst[side] is not None:
            base = min(0.92, 0.55 + 0.13 * self.burst[side]["m"])
        elif self.burst[-side] is not None:
            base = max(0.08, base - 0.13 * self.burst[-side]["m"])
        cap = self.config.lead_tilt_cap
        lead = self.delta() if side == 1 else -self.delta()
        base += self.config.lead_tilt * float(np.clip(lead, -cap, cap))
        return float(np.clip(base, 0.05, 0.95))

    def update_bursts(self):
        cfg = self.config
        for side in (1, -1):
            b = self.burst[side]
            if b is None:
                if self.burst[-side] is None and self.rng.random() < cfg.burst_start_prob:
                    lo, hi = cfg.burst_intensity_range
                    self.burst[side] = {
                        "m": float(self.rng.uniform(lo, hi)),
                        "net": 0.0,
                        "cap": int(self.rng.integers(cfg.burst_cap_range[0], cfg.burst_cap_range[1] + 1)),
                    }
            elif b["net"] >= b["cap"] or b["net"] <= -4:
                self.burst[side] = None

    def run_state_at(self, t):
        return run_extremum(np.asarray(self.break_times), np.asarray(self.break_deltas),
                            t, self.config.window)

    def record_treatment(self, period, t, s, pi):
        """Ledger a fired timeout and schedule its injectable effect."""
        config = self.config
        bit_side = -int(np.sign(s))
        row = {
            "game_id": self.game_id,
            "t": t,
            "s": int(s),
            "treated": 1,
            "pi": pi,
            "run_points": abs(int(s)),
            "censored": t + 1.0 > 12.0 * period,
            "injection_landed_t": None,
        }
        if not row["censored"] and config.true_effect != 0.0:
            pts = 1
            offset = 1.0 - abs(config.true_effect) / pts
            target = -bit_side if config.true_effect < 0 else bit_side
            self.pending.append((round(t + offset, 3), target, pts, len(self.decisions)))
        self.decisions.append(row)

    def maybe_timeout(self, period, t):
        """Policy decision at the onset of a run episode."""
        config = self.config
        res = self.run_state_at(t)
        active = res is not None and abs(res[1]) >= config.rho
        onset = active and not self.run_was_active
        self.run_was_active = active
        if not onset:
            return
        duration, s = res
        if t - self.last_timeout_t < 1.01:
            return
        bit_side = -int(np.sign(s))
        b = self.burst[-bit_side]
        burst_m = b["m"] if b else 0.0
        ssd_eor = -np.sign(s) * self.delta()
        pi = config.policy.probability(abs(s), duration, 48.0 - t, ssd_eor, burst_m)
        if self.rng.random() < pi:
            te = self.emit(period, t, "timeout", bit_side, share_clock=True)
            if te is None:
                return
            self.last_timeout_t = te
            self.record_treatment(period, te, s, pi)
        else:
            self.decisions.append(
                {
                    "game_id": self.game_id,
                    "t": t,
                    "s": int(s),
                    "treated": 0,
                    "pi": pi,
                    "run_points": abs(int(s)),
                    "censored": t + 1.0 > 12.0 * period,
                    "injection_landed_t": None,
                }
            )

    def noise_timeout(self, period, t):
        """Spontaneous timeout; it still treats the play when a run is live."""
        side = 1 if self.rng.random() < 0.5 else -1
        ne = self.emit(period, t, "timeout", side, share_clock=True)
        if ne is None:
            return
        self.last_timeout_t = ne
        res = self.run_state_at(ne)
        if res is not None and abs(res[1]) >= self.config.rho:
            s = res[1]
            if side == -int(np.sign(s)):
                already = any(d["game_id"] == self.game_id and d["t"] == ne and d["treated"]
                              for d in self.decisions[-4:])
                if not already:
                    self.record_treatment(period, ne, s, np.nan)

    def run(self):
        config = self.config
        side = 1 if self.rng.random() < 0.5 else -1
        for period in range(1, 5):
            t = 12.0 * (period - 1)
            self.last_t = max(self.last_t, t)
            self.run_was_active = False
            while True:
                t_next = t + float(self.rng.exponential(config.possession_mean_minutes))
                if t_next >= 12.0 * period - 2 * MIN_EVENT_GAP:
                    self.flush_pending(period, 12.0 * period)
                    break
                self.flush_pending(period, t_next)
                scored = 0
                if self.rng.random() < self.score_prob(side, t_next):
                    scored = int(self.rng.choice([1, 2, 3], p=config.point_value_probs))
                if scored:
                    te = self.emit(period, t_next, "made_shot", side, scored=scored)
                else:
                    te = self.emit(period, t_next, "missed_shot", side)
                    if te is not None:
                        self.emit(period, te, "rebound", -side, share_clock=True)
                if te is None:
                    break
                self.maybe_timeout(period, te)
                if self.rng.random() < config.noise_timeout_rate:
                    self.noise_timeout(period, te)
                self.update_bursts()
                side = -side
                t = te
            self.pending = []


def _finalize_ledger(game, config):
    """Outcome bookkeeping once the game's score path is final.

    The realized effect of a treated decision is the injected score times
    the remaining window after it landed; the counterfactual outcome backs
    it out exactly.
    """
    tl = GameTimeline(
        game_id=game.game_id,
        home_team=game.home,
        away_team=game.away,
        season=config.season,
        game_date=None,
        break_times=np.asarray(game.break_times),
        break_deltas=np.asarray(game.break_deltas, dtype=int),
        play_times=np.asarray([e["t"] for e in game.events]),
        timeout_times=np.array([]),
        timeout_sides=np.array([], dtype=int),
    )
    rows = []
    for row in game.decisions:
        out = dict(row)
        landed = out.pop("injection_landed_t")
        if out["censored"]:
            out["y_realized"] = np.nan
            out["y_counterfactual"] = np.nan
            out["tau_applied"] = 0.0
        else:
            y = effects.outcome(tl, out["t"], out["s"])
            applied = 0.0
            if out["treated"] and landed is not None and landed < out["t"] + 1.0:
                remaining = out["t"] + 1.0 - landed
                applied = float(np.sign(config.true_effect)) * remaining
            out["y_realized"] = y
            out["y_counterfactual"] = y - applied
            out["tau_applied"] = applied
        out["tau"] = config.true_effect
        rows.append(out)
    return rows


def simulate_season(config):
    """Generate one synthetic season.

    Returns:
        events: frame in the raw ingest schema (clock-based timestamps).
        games: per-game metadata (teams, date, betting line).
        ledger: one row per timeout-policy decision with realized and
            counterfactual outcomes for the treated ones.
    """
    strengths = _team_strengths(config)
    vegas_rng = derive_rng(config.seed, "vegas")
    all_events, games, ledger_rows = [], [], []
    for game_id, home, away, date in _schedule(config):
        game = _Game(game_id, home, away, config, strengths,
                     derive_rng(config.seed, "game", game_id))
        game.run()
        spread, ou, ml_h, ml_a = _vegas_line(strengths[home], strengths[away], vegas_rng)
        games.append(
            {
                "game_id": game_id,
                "home_team": home,
                "away_team": away,
                "season": config.season,
                "game_date": date,
                "spread": spread,
                "over_under": ou,
                "moneyline_home": ml_h,
                "moneyline_away": ml_a,
            }
        )
        ledger_rows.extend(_finalize_ledger(game, config))
        for e in game.events:
            all_events.append(
                {
                    "game_id": e["game_id"],
                    "season": config.season,
                    "game_date": date,
                    "period": e["period"],
                    "clock_seconds_remaining": round((12.0 * e["period"] - e["t"]) * 60.0, 6),
                    "event_kind": e["event_kind"],
                    "team": e["team"],
                    "home_score": e["home_score"],
                    "away_score": e["away_score"],
                    "description": "",
                }
            )
    return pd.DataFrame(all_events), pd.DataFrame(games), pd.DataFrame(ledger_rows)


def oracle_att(config, ledger):
    """True ATT over the uncensored simulated timeouts, exact from the ledger."""
    rows = ledger[(ledger["treated"] == 1) & (~ledger["censored"].astype(bool))]
    if len(rows) == 0:
        return 0.0
    return float((rows["y_realized"] - rows["y_counterfactual"]).mean())
