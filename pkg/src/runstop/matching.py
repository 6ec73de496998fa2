"""One-to-one matching with replacement under a weighted Mahalanobis metric.

Every treated unit is matched to its nearest control in a generalized
Mahalanobis distance over the numeric covariates plus the propensity score;
a genetic search over the diagonal weight matrix maximizes the worst
individual balance p-value (lexicographically, then the next worst, and so
on).  Team identities are not distance dimensions; they enter the fitness
through chi-squared balance tests only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import balance
from .util import derive_rng

NUMERIC_MATCH_COLS = [
    "propensity",
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

PAIRED_T_COLS = ["possession", "home"]
CHI2_COLS = ["bit_team", "opposing_team"]
KS_COLS = [c for c in NUMERIC_MATCH_COLS if c not in PAIRED_T_COLS]

COVARIANCE_RIDGE = 1e-8

# Genetic operators are fixed; only the population/stopping knobs vary.
TOURNAMENT_SIZE = 4
BLEND_ALPHA = 0.5
MUTATION_SIGMA = 0.3
ELITE_FRACTION = 0.1


@dataclass
class MatchConfig:
    population_size: int = 200
    wait_generations: int = 4
    max_generations: int = 40
    distance_tolerance: float = 1e-5
    seed: int = 0
    weight_bounds: tuple = (0.01, 100.0)

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.distance_tolerance <= 0:
            raise ValueError("distance_tolerance must be positive")
        lo, hi = self.weight_bounds
        if not (0 < lo <= hi):
            raise ValueError("weight_bounds must be positive and ordered")


DESK_PROFILE = dict(population_size=200, wait_generations=4, max_generations=40,
                    distance_tolerance=1e-5)
PAPER_PROFILE = dict(population_size=8000, wait_generations=4, max_generations=100,
                     distance_tolerance=1e-5)


@dataclass
class MatchedCohort:
    """Treated-to-control assignments with replacement."""

    treated_ids: np.ndarray
    control_ids: np.ndarray
    distances: np.ndarray
    weights: np.ndarray  # diagonal weights over NUMERIC_MATCH_COLS
    scaling: np.ndarray  # inverse Cholesky factor of the covariate covariance
    reuse_counts: pd.Series  # per matched control id
    seed: int = 0
    relaxed: bool = False
    scaling_ridged: bool = False
    trace: list = field(default_factory=list)

    @property
    def n_pairs(self):
        return len(self.treated_ids)

    def pairs_frame(self):
        k = self.reuse_counts.reindex(self.control_ids).to_numpy()
        return pd.DataFrame(
            {
                "treated_id": self.treated_ids,
                "control_id": self.control_ids,
                "distance": self.distances,
                "control_reuse": k.astype(int),
            }
        )


@dataclass
class _MatchData:
    ids: np.ndarray
    x: np.ndarray
    treated: np.ndarray
    scaling: np.ndarray
    ridged: bool
    frame: pd.DataFrame
    ks_values: dict = field(default_factory=dict)  # col -> float array
    team_values: dict = field(default_factory=dict)  # col -> object array
    positions: pd.Series | None = None  # unit_id -> row position


def scaling_matrix(x):
    """Inverse Cholesky factor of the sample covariance.

    With S = chol(cov)^-1, the quadratic form d' S' W S d is invariant to
    rescaling any covariate column (the factor is diagonal-equivariant),
    which an eigendecomposition square root is not.  Singular covariance
    gets a diagonal ridge, reported via the second return value.
    """
    cov = np.cov(np.asarray(x, dtype=float), rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    ridged = False
    ridge = COVARIANCE_RIDGE * max(1.0, float(np.trace(cov)) / cov.shape[0])
    for _ in range(40):
        try:
            chol = np.linalg.cholesky(cov)
            break
        except np.linalg.LinAlgError:
            cov = cov + ridge * np.eye(cov.shape[0])
            ridge *= 10.0
            ridged = True
    else:
        raise np.linalg.LinAlgError("covariance not positive definite even after ridging")
    s = np.linalg.solve(chol, np.eye(chol.shape[0]))
    return s, ridged


def gmd(x_i, x_j, weights, scaling):
    """sqrt((x_i - x_j)' scaling' W scaling (x_i - x_j)) with W = diag(weights)."""
    d = np.asarray(x_i, dtype=float) - np.asarray(x_j, dtype=float)
    z = scaling @ d
    w = np.asarray(weights, dtype=float)
    return float(np.sqrt(np.sum(w * z * z)))


def _prepare(units):
    if "propensity" not in units.columns:
        raise ValueError("units need a propensity column before matching")
    df = units.sort_values("unit_id", kind="stable").reset_index(drop=True)
    x = df[NUMERIC_MATCH_COLS].to_numpy(float)
    scaling, ridged = scaling_matrix(x)
    ids = df["unit_id"].to_numpy()
    return _MatchData(
        ids=ids,
        x=x,
        treated=df["treated"].to_numpy(int) == 1,
        scaling=scaling,
        ridged=ridged,
        frame=df,
        ks_values={c: df[c].to_numpy(float) for c in KS_COLS + PAIRED_T_COLS},
        team_values={c: df[c].to_numpy(object) for c in CHI2_COLS if c in df.columns},
        positions=pd.Series(np.arange(len(ids)), index=ids),
    )


def match_with_weights(units, weights, distance_tolerance=1e-5, seed=0, _data=None):
    """Nearest-control match (with replacement) for every treated unit.

    Distance ties within distance_tolerance break toward the smaller
    control unit_id.
    """
    data = _data if _data is not None else _prepare(units)
    if (~data.treated).sum() == 0:
        raise ValueError("empty control pool")
    w = np.asarray(weights, dtype=float)

    z = data.x @ data.scaling.T * np.sqrt(w)
    zt, zc = z[data.treated], z[~data.treated]
    d2 = (
        np.sum(zt ** 2, axis=1)[:, None]
        + np.sum(zc ** 2, axis=1)[None, :]
        - 2.0 * zt @ zc.T
    )
    np.maximum(d2, 0.0, out=d2)
    dmin = np.sqrt(d2.min(axis=1))
    cut = (dmin + distance_tolerance) ** 2
    # Controls are sorted by unit_id, so the first hit is the smallest id.
    chosen = (d2 <= cut[:, None]).argmax(axis=1)
    dist = np.sqrt(d2[np.arange(len(chosen)), chosen])

    control_ids = data.ids[~data.treated][chosen]
    counts = pd.Series(control_ids).value_counts().sort_index()
    return MatchedCohort(
        treated_ids=data.ids[data.treated],
        control_ids=control_ids,
        distances=dist,
        weights=w,
        scaling=data.scaling,
        reuse_counts=counts,
        seed=seed,
        scaling_ridged=data.ridged,
    )


def matched_frames(cohort, units):
    """(treated_frame, control_frame) row-aligned with reuse multiplicity."""
    indexed = units.set_index("unit_id")
    mt = indexed.loc[cohort.treated_ids].reset_index()
    mc = indexed.loc[cohort.control_ids].reset_index()
    return mt, mc


def fitness(cohort, units, n_boot=500, seed=0, _data=None):
    """Ascending vector of matched-balance p-values (larger-first is better).

    KS bootstrap p-values for numeric covariates and the propensity score,
    paired t-tests for the dichotomous covariates, chi-squared for team
    factors.  Each covariate keeps a fixed bootstrap seed so fitness values
    are comparable across candidate weightings.
    """
    data = _data if _data is not None else _prepare(units)
    t_pos = data.positions.loc[cohort.treated_ids].to_numpy()
    c_pos = data.positions.loc[cohort.control_ids].to_numpy()
    ps = []
    for i, col in enumerate(KS_COLS):
        rng = derive_rng(seed, "fitness-ks", i)
        vals = data.ks_values[col]
        ps.append(balance.ks_bootstrap_test(vals[t_pos], vals[c_pos], n_boot=n_boot, rng=rng))
    for col in PAIRED_T_COLS:
        vals = data.ks_values[col]
        ps.append(balance.paired_t_test(vals[t_pos] - vals[c_pos]))
    for col in CHI2_COLS:
        if col not in data.team_values:
            continue
        vals = data.team_values[col]
        ps.append(balance.chi2_test(vals[t_pos], vals[c_pos])[0])
    return np.sort(np.asarray(ps))


def compare_fitness(a, b):
    """Lexicographic comparison of ascending p-vectors: 1 if a beats b."""
    for x, y in zip(a, b):
        if x > y + 1e-15:
            return 1
        if x < y - 1e-15:
            return -1
    return 0


def genetic_search(units, config=None, fitness_boots=500, time_budget=None):
    """Evolve diagonal GMD weights to maximize worst-case matched balance.

    The initial population contains the identity weighting, so the result is
    never worse than plain (propensity-augmented) Mahalanobis matching.
    Stops after wait_generations without improvement, at max_generations, or
    when the optional wall-clock budget (seconds) runs out (the cohort is
    then flagged relaxed).
    """
    config = config or MatchConfig()
    data = _prepare(units)
    rng = derive_rng(config.seed, "genetic")
    dim = len(NUMERIC_MATCH_COLS)
    lo, hi = config.weight_bounds

    def evaluate(w):
        cohort = match_with_weights(
            units, w, config.distance_tolerance, seed=config.seed, _data=data
        )
        return cohort, fitness(cohort, data.frame, n_boot=fitness_boots,
                               seed=config.seed, _data=data)

    population = [np.ones(dim)]
    while len(population) < config.population_size:
        population.append(np.exp(rng.uniform(np.log(lo), np.log(hi), size=dim)))

    start = time.monotonic()
    scored = [evaluate(w) for w in population]
    fits = [f for _, f in scored]
    order = sorted(range(len(fits)), key=lambda i: tuple(fits[i]), reverse=True)
    best_w = population[order[0]]
    best_cohort, best_fit = scored[order[0]]

    trace = [{"generation": 0, "best_min_p": float(best_fit[0]), "weights": best_w.tolist()}]
    relaxed = False
    stall = 0
    n_elite = max(1, int(ELITE_FRACTION * config.population_size))

    for gen in range(1, config.max_generations + 1):
        if time_budget is not None and time.monotonic() - start > time_budget:
            relaxed = True
            break
        elites = [population[i] for i in order[:n_elite]]
        children = list(elites)
        while len(children) < config.population_size:
            parents = []
            for _ in range(2):
                contenders = rng.integers(0, len(population), size=TOURNAMENT_SIZE)
                winner = max(contenders, key=lambda i: tuple(fits[i]))
                parents.append(population[winner])
            a, b = parents
            lo_g = np.minimum(a, b) - BLEND_ALPHA * np.abs(a - b)
            hi_g = np.maximum(a, b) + BLEND_ALPHA * np.abs(a - b)
            child = rng.uniform(lo_g, hi_g)
            child = child * np.exp(rng.normal(0.0, MUTATION_SIGMA, size=dim))
            children.append(np.clip(child, lo, hi))

        population = children
        scored = [evaluate(w) for w in population]
        fits = [f for _, f in scored]
        order = sorted(range(len(fits)), key=lambda i: tuple(fits[i]), reverse=True)
        gen_best = order[0]
        if compare_fitness(fits[gen_best], best_fit) > 0:
            best_w = population[gen_best]
            best_cohort, best_fit = scored[gen_best]
            stall = 0
        else:
            stall += 1
        trace.append(
            {"generation": gen, "best_min_p": float(best_fit[0]), "weights": best_w.tolist()}
        )
        if stall >= config.wait_generations:
            break

    best_cohort.trace = trace
    best_cohort.relaxed = relaxed
    best_cohort.seed = config.seed
    return best_cohort


def audit_cohort(cohort, units, window=2.0, post_window=1.0):
    """Matched-control uniqueness and the maximum disjoint-window count.

    Each unit occupies [t - window, t + post_window] of its game.  The
    maximum set of mutually disjoint windows among the unique matched
    controls is computed exactly by earliest-window-end greedy scheduling
    within each game.
    """
    unique_ids = pd.unique(cohort.control_ids)
    sub = units.set_index("unit_id").loc[unique_ids]
    n_disjoint = 0
    for _, grp in sub.groupby("game_id"):
        times = np.sort(grp["t"].to_numpy(float))
        last_end = -np.inf
        for t in times:
            if t - window >= last_end:
                n_disjoint += 1
                last_end = t + post_window
    return {"unique_controls": int(len(unique_ids)), "max_disjoint_windows": int(n_disjoint)}
