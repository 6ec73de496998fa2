import numpy as np
import pandas as pd
import pytest

from runstop import matching
from runstop.matching import (
    MatchConfig,
    NUMERIC_MATCH_COLS,
    audit_cohort,
    compare_fitness,
    fitness,
    genetic_search,
    gmd,
    match_with_weights,
)

from oracles import gmd_eigen_oracle


def unit_frame(rng, n_treated=10, n_control=40, live_cols=("propensity", "time_left"),
               treated_shift=0.0, teams=("A", "B", "C")):
    """Unit table where only live_cols vary; the rest are constant."""
    n = n_treated + n_control
    df = pd.DataFrame({c: np.ones(n) for c in NUMERIC_MATCH_COLS})
    df["treated"] = (np.arange(n) < n_treated).astype(int)
    df["unit_id"] = [f"u{i:04d}" for i in range(n)]
    df["game_id"] = [f"g{i % 7}" for i in range(n)]
    df["t"] = rng.uniform(3, 10, size=n)
    df["bit_team"] = rng.choice(list(teams), size=n)
    df["opposing_team"] = rng.choice(list(teams), size=n)
    for c in live_cols:
        df[c] = rng.normal(size=n)
        df.loc[df["treated"] == 1, c] += treated_shift
    df["propensity"] = np.clip(df["propensity"], 0.01, 0.99)
    return df


class TestGMD:
    def test_zero_for_identical_vectors(self):
        x = np.array([1.0, 2.0, 3.0])
        assert gmd(x, x, np.ones(3), np.eye(3)) == 0.0

    def test_euclidean_special_case(self):
        assert gmd([3.0, 4.0], [0.0, 0.0], np.ones(2), np.eye(2)) == pytest.approx(5.0)

    def test_matches_eigendecomposition_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            x = rng.normal(size=5)
            y = rng.normal(size=5)
            w = rng.uniform(0.1, 5.0, size=5)
            a = rng.normal(size=(5, 5))
            scaling = a @ a.T + 0.5 * np.eye(5)  # random SPD scaling
            assert gmd(x, y, w, scaling) == pytest.approx(
                gmd_eigen_oracle(x, y, w, scaling), abs=1e-10
            )


class TestMatchWithWeights:
    def test_single_pair(self):
        rng = np.random.default_rng(22)
        df = unit_frame(rng, n_treated=1, n_control=1)
        cohort = match_with_weights(df, np.ones(len(NUMERIC_MATCH_COLS)))
        assert list(cohort.treated_ids) == ["u0000"]
        assert list(cohort.control_ids) == ["u0001"]

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(23)
        df = unit_frame(rng, n_treated=5, n_control=20,
                        live_cols=("propensity", "time_left", "run_duration"))
        w = rng.uniform(0.2, 3.0, size=len(NUMERIC_MATCH_COLS))
        cohort = match_with_weights(df, w, distance_tolerance=1e-12)

        scaling, _ = matching.scaling_matrix(df[NUMERIC_MATCH_COLS].to_numpy(float))
        treated = df[df["treated"] == 1]
        controls = df[df["treated"] == 0]
        for tid, got_cid in zip(cohort.treated_ids, cohort.control_ids):
            xt = treated.set_index("unit_id").loc[tid, NUMERIC_MATCH_COLS].to_numpy(float)
            best, best_id = np.inf, None
            for rec in controls.itertuples(index=False):
                xc = np.array([getattr(rec, c) for c in NUMERIC_MATCH_COLS], dtype=float)
                d = gmd(xt, xc, w, scaling)
                if d < best - 1e-12:
                    best, best_id = d, rec.unit_id
            assert got_cid == best_id

    def test_tie_break_toward_smaller_control_id(self):
        rng = np.random.default_rng(24)
        df = unit_frame(rng, n_treated=1, n_control=3)
        # Make two controls exactly identical to the treated unit.
        for col in NUMERIC_MATCH_COLS:
            df.loc[1, col] = df.loc[0, col]
            df.loc[3, col] = df.loc[0, col]
        cohort = match_with_weights(df, np.ones(len(NUMERIC_MATCH_COLS)))
        assert list(cohort.control_ids) == ["u0001"]

    def test_reuse_counts(self):
        rng = np.random.default_rng(25)
        df = unit_frame(rng, n_treated=4, n_control=1)
        cohort = match_with_weights(df, np.ones(len(NUMERIC_MATCH_COLS)))
        assert cohort.reuse_counts.loc["u0004"] == 4

    def test_empty_control_pool_raises(self):
        rng = np.random.default_rng(26)
        df = unit_frame(rng, n_treated=2, n_control=0)
        with pytest.raises(ValueError):
            match_with_weights(df, np.ones(len(NUMERIC_MATCH_COLS)))

    def test_pairing_invariant_to_column_rescaling(self):
        rng = np.random.default_rng(27)
        df = unit_frame(rng, n_treated=8, n_control=30,
                        live_cols=("propensity", "time_left", "moneyline"))
        w = rng.uniform(0.5, 2.0, size=len(NUMERIC_MATCH_COLS))
        base = match_with_weights(df, w, distance_tolerance=1e-9)
        scaled = df.copy()
        scaled["time_left"] = scaled["time_left"] * 250.0
        again = match_with_weights(scaled, w, distance_tolerance=1e-9)
        assert list(base.control_ids) == list(again.control_ids)


class TestFitness:
    def test_self_match_maximal(self):
        rng = np.random.default_rng(28)
        df = unit_frame(rng, n_treated=12, n_control=12,
                        live_cols=("propensity", "time_left"))
        # Controls duplicate the treated units exactly.
        for col in list(NUMERIC_MATCH_COLS) + ["bit_team", "opposing_team"]:
            df.loc[12:, col] = df.loc[:11, col].to_numpy()
        cohort = match_with_weights(df, np.ones(len(NUMERIC_MATCH_COLS)))
        ps = fitness(cohort, df, n_boot=200, seed=0)
        assert np.allclose(ps, 1.0, atol=1e-9)

    def test_lexicographic_comparison(self):
        # Hand comparison: larger smallest-p wins; ties fall to the next entry.
        a = np.array([0.2, 0.5, 0.9])
        b = np.array([0.1, 0.99, 0.99])
        assert compare_fitness(a, b) == 1
        assert compare_fitness(b, a) == -1
        assert compare_fitness(np.array([0.1, 0.3, 0.6]), np.array([0.1, 0.2, 0.9])) == 1
        assert compare_fitness(a, a.copy()) == 0


class TestGeneticSearch:
    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(29)
        df = unit_frame(rng, n_treated=10, n_control=40,
                        live_cols=("propensity", "time_left"), treated_shift=0.5)
        cfg = MatchConfig(population_size=8, max_generations=3, wait_generations=2, seed=11)
        c1 = genetic_search(df, cfg, fitness_boots=150)
        c2 = genetic_search(df, cfg, fitness_boots=150)
        assert list(c1.control_ids) == list(c2.control_ids)
        assert np.array_equal(c1.weights, c2.weights)

    def test_identity_weighting_never_beats_result(self):
        rng = np.random.default_rng(30)
        df = unit_frame(rng, n_treated=12, n_control=60,
                        live_cols=("propensity", "time_left", "run_duration"),
                        treated_shift=0.8)
        cfg = MatchConfig(population_size=10, max_generations=4, wait_generations=2, seed=3)
        result = genetic_search(df, cfg, fitness_boots=150)
        identity = match_with_weights(df, np.ones(len(NUMERIC_MATCH_COLS)),
                                      cfg.distance_tolerance, seed=cfg.seed)
        f_res = fitness(result, df, n_boot=150, seed=cfg.seed)
        f_id = fitness(identity, df, n_boot=150, seed=cfg.seed)
        assert compare_fitness(f_res, f_id) >= 0

    def test_best_fitness_nondecreasing_in_trace(self):
        rng = np.random.default_rng(31)
        df = unit_frame(rng, n_treated=10, n_control=50,
                        live_cols=("propensity", "ssd_eor"), treated_shift=0.7)
        cfg = MatchConfig(population_size=8, max_generations=5, wait_generations=5, seed=5)
        result = genetic_search(df, cfg, fitness_boots=150)
        best_ps = [g["best_min_p"] for g in result.trace]
        assert all(b >= a - 1e-12 for a, b in zip(best_ps, best_ps[1:]))

    def test_time_budget_flags_relaxed(self):
        rng = np.random.default_rng(32)
        df = unit_frame(rng, n_treated=10, n_control=50,
                        live_cols=("propensity", "time_left"), treated_shift=0.5)
        cfg = MatchConfig(population_size=8, max_generations=50, wait_generations=50, seed=6)
        result = genetic_search(df, cfg, fitness_boots=150, time_budget=0.0)
        assert result.relaxed

    def test_upweights_confounded_covariate_vs_grid_oracle(self):
        # time_left is strongly imbalanced while propensity is already
        # balanced; the control pool is deep enough that matching on
        # time_left has distinct neighbors to pick.
        rng = np.random.default_rng(33)
        df = unit_frame(rng, n_treated=10, n_control=300,
                        live_cols=("propensity", "time_left"))
        df.loc[df["treated"] == 1, "time_left"] += 1.2
        cfg = MatchConfig(population_size=16, max_generations=6, wait_generations=3,
                          seed=7, weight_bounds=(0.01, 100.0))
        result = genetic_search(df, cfg, fitness_boots=120)

        idx_p = NUMERIC_MATCH_COLS.index("propensity")
        idx_t = NUMERIC_MATCH_COLS.index("time_left")
        grid = np.geomspace(0.01, 100.0, 50)
        best_fit, best_w = None, None
        for wp in grid:
            for wt in grid:
                w = np.ones(len(NUMERIC_MATCH_COLS))
                w[idx_p], w[idx_t] = wp, wt
                cohort = match_with_weights(df, w, cfg.distance_tolerance, seed=cfg.seed)
                f = fitness(cohort, df, n_boot=120, seed=cfg.seed)
                if best_fit is None or compare_fitness(f, best_fit) > 0:
                    best_fit, best_w = f, w
        # The grid oracle confirms the confounded covariate needs the weight.
        assert best_w[idx_t] > best_w[idx_p]
        assert result.weights[idx_t] > result.weights[idx_p]
        f_res = fitness(result, df, n_boot=120, seed=cfg.seed)
        # Lexicographically not worse than the coarse grid on the worst p.
        assert f_res[0] >= best_fit[0] - 0.05


def test_audit_counts_hand_case():
    units = pd.DataFrame(
        {
            "unit_id": ["t1", "t2", "t3", "c1", "c2", "c3"],
            "game_id": ["g1", "g1", "g1", "g1", "g1", "g2"],
            "t": [5.0, 6.0, 7.0, 5.0, 5.5, 9.0],
            "treated": [1, 1, 1, 0, 0, 0],
        }
    )
    cohort = matching.MatchedCohort(
        treated_ids=np.array(["t1", "t2", "t3"]),
        control_ids=np.array(["c1", "c2", "c1"]),
        distances=np.zeros(3),
        weights=np.ones(13),
        scaling=np.eye(13),
        reuse_counts=pd.Series({"c1": 2, "c2": 1}),
    )
    out = audit_cohort(cohort, units, window=2.0, post_window=1.0)
    # c1 at 5.0 and c2 at 5.5 overlap: [3,6] vs [3.5,6.5].
    assert out == {"unique_controls": 2, "max_disjoint_windows": 1}

    cohort2 = matching.MatchedCohort(
        treated_ids=np.array(["t1", "t2"]),
        control_ids=np.array(["c1", "c3"]),
        distances=np.zeros(2),
        weights=np.ones(13),
        scaling=np.eye(13),
        reuse_counts=pd.Series({"c1": 1, "c3": 1}),
    )
    out2 = audit_cohort(cohort2, units, window=2.0, post_window=1.0)
    assert out2 == {"unique_controls": 2, "max_disjoint_windows": 2}


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(population_size=1)
    with pytest.raises(ValueError):
        MatchConfig(distance_tolerance=0.0)
    with pytest.raises(ValueError):
        MatchConfig(weight_bounds=(0.0, 1.0))
