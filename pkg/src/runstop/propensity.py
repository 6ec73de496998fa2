"""Timeout-propensity model: penalized additive logistic regression.

Continuous covariates are expanded in cubic B-spline bases with interior
knots at quantiles, team identities are one-hot encoded, and a single ridge
penalty (selected by k-fold cross-validated deviance on a log grid) shrinks
every non-intercept coefficient.  Fitting is iteratively reweighted least
squares on the penalized log-likelihood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline

from .errors import ConvergenceError
from .util import derive_rng

CONTINUOUS_COVARIATES = [
    "run_point_total",
    "run_duration",
    "time_left",
    "win_probability",
    "ssd_bor",
    "ssd_eor",
    "week_in_season",
    "over_under",
    "spread",
    "moneyline",
]
BINARY_COVARIATES = ["possession", "home"]
CATEGORICAL_COVARIATES = ["bit_team", "opposing_team"]

DEFAULT_LAMBDA_GRID = tuple(10.0 ** np.arange(-3.0, 3.5, 1.0))
DEFAULT_KNOTS = 10
SPLINE_DEGREE = 3
PROB_FLOOR = 1e-10


def _interior_knots(x, n_interior):
    qs = np.linspace(0, 1, n_interior + 2)[1:-1]
    knots = np.unique(np.quantile(x, qs))
    lo, hi = float(np.min(x)), float(np.max(x))
    knots = knots[(knots > lo) & (knots < hi)]
    return knots, lo, hi


def _knot_vector(interior, lo, hi, degree=SPLINE_DEGREE):
    return np.r_[[lo] * (degree + 1), interior, [hi] * (degree + 1)]


def _spline_design(x, knot_vector, degree=SPLINE_DEGREE):
    lo, hi = knot_vector[degree], knot_vector[-degree - 1]
    xc = np.clip(np.asarray(x, dtype=float), lo, hi)
    return BSpline.design_matrix(xc, knot_vector, degree).toarray()


@dataclass
class AdditiveLogisticModel:
    """Design specification plus fitted state for one penalized logistic fit."""

    spline_knots: dict = field(default_factory=dict)  # col -> full knot vector
    linear_cols: list = field(default_factory=list)
    linear_scales: dict = field(default_factory=dict)  # frozen on first design
    categorical_levels: dict = field(default_factory=dict)
    degree: int = SPLINE_DEGREE
    lam: float = 1.0
    coef: np.ndarray | None = None
    columns: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    deviance: float = np.nan
    null_deviance: float = np.nan

    @classmethod
    def build(cls, df, continuous=(), binary=(), categorical=(), n_knots=DEFAULT_KNOTS):
        """Derive basis/encoding choices from the training frame.

        Continuous columns with too few distinct values fall back to plain
        linear terms so quantile knots stay well defined.
        """
        model = cls()
        for col in continuous:
            x = df[col].to_numpy(float)
            if len(np.unique(x)) < max(4, n_knots // 2) or np.ptp(x) == 0.0:
                model.linear_cols.append(col)
                continue
            interior, lo, hi = _interior_knots(x, n_knots)
            model.spline_knots[col] = _knot_vector(interior, lo, hi)
        for col in binary:
            model.linear_cols.append(col)
        for col in categorical:
            model.categorical_levels[col] = sorted(pd.unique(df[col]).tolist())
        return model

    # -- design -----------------------------------------------------------
    def design(self, df):
        n = len(df)
        blocks = [np.ones((n, 1))]
        names = ["intercept"]
        for col, kv in self.spline_knots.items():
            b = _spline_design(df[col].to_numpy(float), kv, self.degree)
            blocks.append(b)
            names.extend(f"{col}:bs{j}" for j in range(b.shape[1]))
        for col in self.linear_cols:
            x = df[col].to_numpy(float)
            if col not in self.linear_scales:
                s = float(np.max(np.abs(x)))
                self.linear_scales[col] = s if s > 0 else 1.0
            blocks.append((x / self.linear_scales[col])[:, None])
            names.append(f"{col}:lin")
        for col, levels in self.categorical_levels.items():
            codes = pd.Categorical(df[col], categories=levels).codes
            b = np.zeros((n, len(levels)))
            valid = codes >= 0
            b[np.nonzero(valid)[0], codes[valid]] = 1.0
            blocks.append(b)
            names.extend(f"{col}={lv}" for lv in levels)
        self.columns = names
        return np.concatenate(blocks, axis=1)

    # -- fitting ----------------------------------------------------------
    def fit(self, df, y, lam=None, tol=1e-8, max_iter=200, on_nonconvergence="raise"):
        """Penalized IRLS fit; raises ConvergenceError unless told to fall back."""
        if lam is not None:
            self.lam = float(lam)
        X = self.design(df)
        y = np.asarray(y, dtype=float)
        coef, info = _fit_penalized_irls(X, y, self.lam, tol=tol, max_iter=max_iter)
        self.coef = coef
        self.converged = info["converged"]
        self.n_iter = info["n_iter"]
        self.deviance = info["deviance"]
        ybar = np.clip(y.mean(), PROB_FLOOR, 1 - PROB_FLOOR)
        self.null_deviance = -2.0 * float(
            np.sum(y * np.log(ybar) + (1 - y) * np.log(1 - ybar))
        )
        if not self.converged and on_nonconvergence == "raise":
            raise ConvergenceError(
                f"IRLS did not converge in {max_iter} iterations (lam={self.lam:g})",
                trace=info["trace"],
            )
        return self

    def predict(self, df):
        X = self.design(df)
        eta = X @ self.coef
        return np.clip(_sigmoid(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)

    # -- persistence -------------------------------------------------------
    def to_dict(self):
        # Column layout follows insertion order, so knots and levels are
        # serialized as ordered pairs rather than objects.
        return {
            "spline_knots": [[k, v.tolist()] for k, v in self.spline_knots.items()],
            "linear_cols": list(self.linear_cols),
            "linear_scales": dict(self.linear_scales),
            "categorical_levels": [[k, list(v)] for k, v in self.categorical_levels.items()],
            "degree": self.degree,
            "lam": self.lam,
            "coef": None if self.coef is None else self.coef.tolist(),
            "columns": list(self.columns),
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(
            spline_knots={k: np.asarray(v, dtype=float) for k, v in d["spline_knots"]},
            linear_cols=list(d["linear_cols"]),
            linear_scales={k: float(v) for k, v in d.get("linear_scales", {}).items()},
            categorical_levels={k: list(v) for k, v in d["categorical_levels"]},
            degree=int(d["degree"]),
            lam=float(d["lam"]),
        )
        model.coef = None if d["coef"] is None else np.asarray(d["coef"], dtype=float)
        model.columns = list(d["columns"])
        model.converged = bool(d.get("converged", True))
        return model


def _sigmoid(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _binomial_deviance(y, mu):
    mu = np.clip(mu, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -2.0 * float(np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu)))


def _penalized_objective(X, y, coef, lam):
    mu = _sigmoid(X @ coef)
    return _binomial_deviance(y, mu) + lam * float(np.sum(coef[1:] ** 2))


def _fit_penalized_irls(X, y, lam, tol=1e-8, max_iter=200):
    """IRLS with step halving on the ridge-penalized deviance.

    The intercept (column 0) is unpenalized; the penalty enters the normal
    equations as 2*lam*I because the objective is deviance + lam*||beta||^2.
    """
    n, p = X.shape
    pen = 2.0 * lam * np.eye(p)
    pen[0, 0] = 0.0

    coef = np.zeros(p)
    ybar = np.clip(y.mean(), 0.01, 0.99)
    coef[0] = np.log(ybar / (1 - ybar))
    obj = _penalized_objective(X, y, coef, lam)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ coef
        mu = np.clip(_sigmoid(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)
        w = mu * (1.0 - mu)
        z = eta + (y - mu) / w
        xw = X * w[:, None]
        lhs = X.T @ xw + pen / 2.0
        rhs = xw.T @ z
        try:
            new_coef = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            new_coef = np.linalg.lstsq(lhs, rhs, rcond=None)[0]

        step = new_coef - coef
        new_obj = _penalized_objective(X, y, coef + step, lam)
        halvings = 0
        while new_obj > obj + 1e-12 and halvings < 10:
            step *= 0.5
            halvings += 1
            new_obj = _penalized_objective(X, y, coef + step, lam)
        coef = coef + step
        trace.append(new_obj)
        delta = float(np.max(np.abs(step)))
        obj_drop = obj - new_obj
        obj = new_obj
        if delta < tol or obj_drop < tol * (abs(obj) + 1.0) * 1e-4:
            converged = True
            break

    mu = _sigmoid(X @ coef)
    return coef, {
        "converged": converged,
        "n_iter": it,
        "deviance": _binomial_deviance(y, mu),
        "trace": trace,
    }


def cross_validate_lambda(model, df, y, lam_grid=DEFAULT_LAMBDA_GRID, folds=5, seed=0,
                          tol=1e-6, max_iter=100):
    """Mean held-out deviance per lambda; returns (best_lam, table)."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    rng = derive_rng(seed, "lambda-cv")
    fold_ids = rng.permutation(np.arange(n) % folds)
    scores = []
    for lam in lam_grid:
        dev = 0.0
        for f in range(folds):
            tr, te = fold_ids != f, fold_ids == f
            m = AdditiveLogisticModel(
                spline_knots=model.spline_knots,
                linear_cols=model.linear_cols,
                categorical_levels=model.categorical_levels,
                degree=model.degree,
            )
            m.fit(df[tr], y[tr], lam=lam, tol=tol, max_iter=max_iter,
                  on_nonconvergence="fallback")
            dev += _binomial_deviance(y[te], m.predict(df[te]))
        scores.append(dev / n)
    best = int(np.argmin(scores))
    table = pd.DataFrame({"lam": list(lam_grid), "cv_deviance": scores})
    return float(lam_grid[best]), table


@dataclass
class PropensityModel:
    """Fitted propensity model plus per-unit scores."""

    model: AdditiveLogisticModel
    fitted_scores: pd.Series  # indexed by unit_id
    lam: float
    seed: int
    cv_table: pd.DataFrame | None = None

    def predict(self, units):
        return self.model.predict(units)

    def to_json(self, path):
        payload = {
            "model": self.model.to_dict(),
            "lam": self.lam,
            "seed": self.seed,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        model = AdditiveLogisticModel.from_dict(payload["model"])
        return cls(model=model, fitted_scores=pd.Series(dtype=float),
                   lam=payload["lam"], seed=payload["seed"])


def fit_propensity(units, n_knots=DEFAULT_KNOTS, lam_grid=DEFAULT_LAMBDA_GRID, folds=5,
                   seed=0, tol=1e-8, max_iter=200, on_nonconvergence="raise"):
    """Fit the timeout-propensity model on the unit table.

    The unit table must carry the full covariate set plus treated and
    unit_id.  Rows are canonically sorted by unit_id first so the fit is
    invariant to input ordering.
    """
    units = units.sort_values("unit_id", kind="stable").reset_index(drop=True)
    n_treated = int(units["treated"].sum())
    n_control = len(units) - n_treated
    if min(n_treated, n_control) < 5:
        raise ValueError(f"need units in both arms, got {n_treated} treated / {n_control} control")

    y = units["treated"].to_numpy(float)
    model = AdditiveLogisticModel.build(
        units,
        continuous=CONTINUOUS_COVARIATES,
        binary=BINARY_COVARIATES,
        categorical=CATEGORICAL_COVARIATES,
        n_knots=n_knots,
    )
    lam, cv_table = cross_validate_lambda(model, units, y, lam_grid=lam_grid, folds=folds, seed=seed)
    model.fit(units, y, lam=lam, tol=tol, max_iter=max_iter, on_nonconvergence=on_nonconvergence)
    scores = pd.Series(model.predict(units), index=units["unit_id"].to_numpy(), name="propensity")
    return PropensityModel(model=model, fitted_scores=scores, lam=lam, seed=seed, cv_table=cv_table)


def evaluate_cv(units, splits=1000, train_frac=0.7, threshold=0.5, n_knots=DEFAULT_KNOTS,
                lam=None, lam_grid=DEFAULT_LAMBDA_GRID, folds=5, seed=0):
    """Average TNR/TPR/NPV/PPV over Monte Carlo train/test splits.

    The ridge penalty is selected once on the full table and reused for
    every split; splits whose training half is single-class are redrawn.
    """
    units = units.sort_values("unit_id", kind="stable").reset_index(drop=True)
    y = units["treated"].to_numpy(float)
    model = AdditiveLogisticModel.build(
        units,
        continuous=CONTINUOUS_COVARIATES,
        binary=BINARY_COVARIATES,
        categorical=CATEGORICAL_COVARIATES,
        n_knots=n_knots,
    )
    if lam is None:
        lam, _ = cross_validate_lambda(model, units, y, lam_grid=lam_grid, folds=folds, seed=seed)

    n = len(units)
    n_train = int(round(train_frac * n))
    rng = derive_rng(seed, "mc-splits")
    rates = {"TNR": [], "TPR": [], "NPV": [], "PPV": []}
    done = 0
    while done < splits:
        perm = rng.permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        if len(np.unique(y[tr])) < 2 or len(te) == 0:
            continue
        m = AdditiveLogisticModel(
            spline_knots=model.spline_knots,
            linear_cols=model.linear_cols,
            categorical_levels=model.categorical_levels,
            degree=model.degree,
        )
        m.fit(units.iloc[tr], y[tr], lam=lam, tol=1e-6, max_iter=100,
              on_nonconvergence="fallback")
        pred = (m.predict(units.iloc[te]) >= threshold).astype(float)
        truth = y[te]
        tp = float(np.sum((pred == 1) & (truth == 1)))
        tn = float(np.sum((pred == 0) & (truth == 0)))
        fp = float(np.sum((pred == 1) & (truth == 0)))
        fn = float(np.sum((pred == 0) & (truth == 1)))
        rates["TNR"].append(tn / (tn + fp) if tn + fp else np.nan)
        rates["TPR"].append(tp / (tp + fn) if tp + fn else np.nan)
        rates["NPV"].append(tn / (tn + fn) if tn + fn else np.nan)
        rates["PPV"].append(tp / (tp + fp) if tp + fp else np.nan)
        done += 1
    return {k: float(np.nanmean(v)) for k, v in rates.items()}
