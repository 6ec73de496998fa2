"""Small shared helpers: time conventions, seeding, interval logic."""

from __future__ import annotations

import zlib

import numpy as np

# All game times are minutes from tip-off, rounded to this many decimals so
# that times computed along different arithmetic paths (clock conversion,
# 5-second lattice, CSV round-trips) compare equal exactly.
TIME_DECIMALS = 6

REGULATION_MINUTES = 48.0
PERIOD_MINUTES = 12.0
OVERTIME_MINUTES = 5.0

# Slack for comparing game times computed along different float paths; far
# smaller than any legal spacing between distinct instants.
TIME_EPS = 1e-9


def round_time(t):
    """Canonical rounding for game times (scalar or array)."""
    return np.round(t, TIME_DECIMALS)


def clock_to_minutes(period, clock_seconds_remaining):
    """Absolute game time for a (period, seconds-remaining) pair.

    Regulation periods are 12 minutes; periods 5+ are 5-minute overtimes and
    map past the 48-minute mark (they are dropped during cleaning).
    """
    period = np.asarray(period, dtype=float)
    clock = np.asarray(clock_seconds_remaining, dtype=float)
    reg = PERIOD_MINUTES * (period - 1.0) + (PERIOD_MINUTES - clock / 60.0)
    ot = REGULATION_MINUTES + OVERTIME_MINUTES * (period - 5.0) + (OVERTIME_MINUTES - clock / 60.0)
    return round_time(np.where(period <= 4, reg, ot))


def period_of(t):
    """Period containing game time ``t``; boundary instants go to the earlier period."""
    if t <= 0.0:
        return 1
    return int(np.ceil(round_time(t) / PERIOD_MINUTES))


def period_bounds(period):
    """(start, end] interval of a regulation period in game minutes."""
    return PERIOD_MINUTES * (period - 1), PERIOD_MINUTES * period


def lattice_times(step_seconds=5.0, end_minutes=REGULATION_MINUTES):
    """Evaluation lattice 0, step, 2*step, ... covering regulation time."""
    n = int(round(end_minutes * 60.0 / step_seconds))
    return round_time(np.arange(n + 1) * (step_seconds / 60.0))


def derive_seed(master_seed, *names):
    """Deterministic substream seed for a named pipeline stage.

    Every source of randomness draws from ``derive_rng(master, "stage", idx)``
    so reruns with the same master seed are bit-reproducible regardless of
    execution order.
    """
    parts = [np.uint32(master_seed & 0xFFFFFFFF)]
    for name in names:
        if isinstance(name, (int, np.integer)):
            parts.append(np.uint32(int(name) & 0xFFFFFFFF))
        else:
            parts.append(np.uint32(zlib.crc32(str(name).encode("utf-8"))))
    return [int(p) for p in parts]


def derive_rng(master_seed, *names):
    return np.random.default_rng(np.random.SeedSequence(derive_seed(master_seed, *names)))
