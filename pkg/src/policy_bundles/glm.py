"""Design matrices and Poisson log-link regression fitted by IRLS."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln, xlogy

from .errors import ConfigError, ConvergenceError, DataError, NumericalError

COVARIATE_TERMS = {
    "prescribing_rate": "Prescribing.Rate",
    "gini": "Gini",
    "income": "Income",
}
YEAR_MODES = ("categorical", "linear")
NEAR_SINGULAR = 1e10


class NearSingularWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model: deaths ~ offset(log population) + fixed effects + terms.

    ``cluster_lags`` lists the lags L that each add a categorical term over
    the lag-L cluster label.  ``reference_levels`` may pin the reference of
    ``"state"``, ``"year"`` or ``"cluster"``; defaults are the first sorted
    level for state and year and cluster 1.
    """

    cluster_lags: tuple = (1,)
    covariates: tuple = ("prescribing_rate", "gini", "income")
    include_gender: bool = True
    include_deaths_lag: bool = True
    year_mode: str = "categorical"
    reference_levels: dict = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "cluster_lags", tuple(sorted(set(int(x) for x in self.cluster_lags))))
        if self.year_mode not in YEAR_MODES:
            raise ConfigError(f"year_mode must be one of {YEAR_MODES}")
        unknown = set(self.covariates) - set(COVARIATE_TERMS)
        if unknown:
            raise ConfigError(f"unknown covariates {sorted(unknown)}")
        if any(L < 1 for L in self.cluster_lags):
            raise ConfigError("cluster lags must be positive")


def cluster_term(lag: int, level) -> str:
    return f"factor(cluster.lag{lag}){level}"


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    columns: tuple
    X: np.ndarray
    offset: np.ndarray
    y: np.ndarray
    row_keys: tuple
    spec: ModelSpec
    levels: dict
    all_columns: tuple
    dropped_columns: tuple = ()
    n_dropped_rows: int = 0
    dropped_rows: tuple = ()

    @property
    def n_rows(self):
        return self.X.shape[0]


def _male_share(gender) -> float:
    if gender == "Male":
        return 1.0
    if gender == "Female":
        return 0.0
    share = float(gender)
    if not 0.0 <= share <= 1.0:
        raise DataError(f"gender share must lie in [0, 1], got {share}")
    return share


def _row_usable(row, spec: ModelSpec) -> bool:
    if spec.include_deaths_lag and row.deaths_lag.get(1) is None:
        return False
    return all(row.cluster_lag.get(L) is not None for L in spec.cluster_lags)


def _encode(rows, spec: ModelSpec, levels: dict) -> np.ndarray:
    """Full (pre-aliasing) model matrix for ``rows`` under fitted ``levels``."""
    blocks = []
    n = len(rows)
    blocks.append(np.ones((n, 1)))

    def dummies(values, factor):
        lv, ref = levels[factor]
        pos = {v: i for i, v in enumerate(x for x in lv if x != ref)}
        out = np.zeros((n, len(pos)))
        for i, v in enumerate(values):
            if v not in lv:
                raise DataError(f"level {v!r} of factor {factor} was not seen at fit time")
            if v != ref:
                out[i, pos[v]] = 1.0
        return out

    blocks.append(dummies([r.state for r in rows], "state"))
    if spec.year_mode == "categorical":
        blocks.append(dummies([int(r.year) for r in rows], "year"))
    else:
        origin = levels["year"][1]
        blocks.append(np.array([[float(r.year) - origin] for r in rows]).reshape(n, 1))
    if spec.include_gender:
        blocks.append(np.array([_male_share(r.gender) for r in rows], dtype=float).reshape(n, 1))
    for cov in spec.covariates:
        blocks.append(np.array([float(getattr(r, cov)) for r in rows]).reshape(n, 1))
    if spec.include_deaths_lag:
        blocks.append(np.array([float(r.deaths_lag[1]) for r in rows]).reshape(n, 1))
    for L in spec.cluster_lags:
        blocks.append(dummies([r.cluster_lag[L] for r in rows], f"cluster.lag{L}"))
    return np.hstack(blocks)


def _column_names(spec: ModelSpec, levels: dict) -> list[str]:
    names = ["(Intercept)"]
    lv, ref = levels["state"]
    names += [f"factor(state){s}" for s in lv if s != ref]
    if spec.year_mode == "categorical":
        lv, ref = levels["year"]
        names += [f"factor(year){y}" for y in lv if y != ref]
    else:
        names.append("year")
    if spec.include_gender:
        names.append("GenderMale")
    names += [COVARIATE_TERMS[c] for c in spec.covariates]
    if spec.include_deaths_lag:
        names.append("Deaths.lag1")
    for L in spec.cluster_lags:
        lv, ref = levels[f"cluster.lag{L}"]
        names += [cluster_term(L, c) for c in lv if c != ref]
    return names


def _levels(values, factor, reference):
    lv = tuple(sorted(set(values)))
    if len(lv) < 2:
        raise DataError(f"factor {factor} has a single observed level {lv}")
    if reference is None:
        reference = lv[0]
    if reference not in lv:
        raise ConfigError(f"reference level {reference!r} not observed for factor {factor}")
    return lv, reference


def independent_columns(X: np.ndarray, tol: float = 1e-7) -> list[int]:
    """Indices of columns kept by a left-to-right pivoted Gram-Schmidt.

    A column is aliased when its residual on the previously kept columns has
    norm at most ``tol`` times its own norm; aliased columns are skipped and
    later columns are still considered (the usual limited-pivoting rule).
    """
    n, p = X.shape
    Q = np.zeros((n, min(n, p)))
    keep = []
    for j in range(p):
        v = X[:, j].astype(np.float64)
        norm = np.linalg.norm(v)
        if norm == 0 or len(keep) == n:
            continue
        q = Q[:, : len(keep)]
        r = v - q @ (q.T @ v)
        r = r - q @ (q.T @ r)
        rn = np.linalg.norm(r)
        if rn > tol * norm:
            Q[:, len(keep)] = r / rn
            keep.append(j)
    return keep


def build_design_matrix(panel: Sequence, spec: ModelSpec, drop_incomplete: bool = False) -> DesignMatrix:
    """Dummy-coded model matrix with a log-population offset.

    Columns: intercept, state dummies, year dummies (or a centred linear
    year), GenderMale, covariates, Deaths.lag1, then one drop-first block per
    cluster lag.  Rows missing a required lag raise unless
    ``drop_incomplete`` is set, in which case they are removed and counted.
    Aliased columns are removed and listed in ``dropped_columns``.
    """
    rows = list(panel)
    usable = [r for r in rows if _row_usable(r, spec)]
    dropped = [r for r in rows if not _row_usable(r, spec)]
    if dropped and not drop_incomplete:
        raise DataError(
            f"{len(dropped)} panel rows lack lags required by model {spec.name!r}, "
            f"e.g. {dropped[0].state} {dropped[0].year} {dropped[0].gender}"
        )
    if not usable:
        raise DataError("no usable panel rows")
    refs = spec.reference_levels
    levels = {
        "state": _levels([r.state for r in usable], "state", refs.get("state")),
        "year": _levels([int(r.year) for r in usable], "year", refs.get("year")),
    }
    if spec.include_gender:
        _levels([r.gender for r in usable], "gender", "Female")
    for L in spec.cluster_lags:
        values = [int(r.cluster_lag[L]) for r in usable]
        ref = refs.get("cluster")
        if ref is None:
            ref = 1 if 1 in values else min(values)
        levels[f"cluster.lag{L}"] = _levels(values, f"cluster.lag{L}", int(ref))
    full = _encode(usable, spec, levels)
    names = _column_names(spec, levels)
    keep = independent_columns(full)
    dropped_cols = tuple(names[j] for j in range(len(names)) if j not in set(keep))
    X = np.ascontiguousarray(full[:, keep])
    y = np.array([float(r.deaths) for r in usable])
    offset = np.log(np.array([float(r.population) for r in usable]))
    return DesignMatrix(
        columns=tuple(names[j] for j in keep),
        X=X,
        offset=offset,
        y=y,
        row_keys=tuple((r.state, int(r.year), r.gender) for r in usable),
        spec=spec,
        levels=levels,
        all_columns=tuple(names),
        dropped_columns=dropped_cols,
        n_dropped_rows=len(dropped),
        dropped_rows=tuple(f"{r.state}:{r.year}:{r.gender}" for r in dropped),
    )


def design_from_arrays(X, y, offset=None, columns=None) -> DesignMatrix:
    """Wrap raw arrays as a design with no factor structure (no ``predict``)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 1 and np.ndim(y) == 1 and len(y) > 1:
        X = X.T
    y = np.asarray(y, dtype=np.float64)
    offset = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=np.float64)
    if X.shape[0] != len(y) or len(offset) != len(y):
        raise DataError("X, y and offset lengths differ")
    columns = tuple(columns) if columns is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    return DesignMatrix(
        columns=columns, X=X, offset=offset, y=y,
        row_keys=tuple(range(len(y))), spec=ModelSpec(cluster_lags=(), name="arrays"),
        levels={}, all_columns=columns,
    )


# -- fitting ----------------------------------------------------------------


def poisson_deviance(y, mu) -> float:
    return float(2.0 * np.sum(xlogy(y, y / np.where(mu > 0, mu, 1.0)) - (y - mu)))


def poisson_log_likelihood(y, mu) -> float:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(np.sum(xlogy(y, mu) - mu - gammaln(y + 1.0)))


def aic(log_likelihood: float, n_params: int) -> float:
    return 2.0 * n_params - 2.0 * log_likelihood


@dataclass(frozen=True, eq=False)
class FitResult:
    names: tuple
    coef: np.ndarray
    cov: np.ndarray
    log_likelihood: float
    aic: float
    deviance: float
    iterations: int
    converged: bool
    n_used: int
    n_dropped_rows: int
    dropped_columns: tuple
    trace: tuple
    condition_number: float
    design: DesignMatrix

    @property
    def n_params(self) -> int:
        return len(self.names)

    @property
    def fitted(self) -> np.ndarray:
        return np.exp(self.design.offset + self.design.X @ self.coef)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def with_coefficients(self, updates: dict) -> FitResult:
        """Copy with selected coefficients replaced; ``log_likelihood``,
        ``aic`` and ``deviance`` are recomputed from the new values."""
        coef = self.coef.copy()
        for name, value in updates.items():
            coef[self.index(name)] = value
        mu = np.exp(self.design.offset + self.design.X @ coef)
        ll = poisson_log_likelihood(self.design.y, mu)
        return FitResult(
            self.names, coef, self.cov, ll, aic(ll, len(coef)), poisson_deviance(self.design.y, mu),
            self.iterations, self.converged, self.n_used, self.n_dropped_rows,
            self.dropped_columns, self.trace, self.condition_number, self.design,
        )


def _wls(X, z, w):
    sw = np.sqrt(w)
    beta, *_ = linalg.lstsq(X * sw[:, None], z * sw, lapack_driver="gelsd")
    return beta


def fit_poisson_irls(
    design: DesignMatrix,
    tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 20,
    coef_bound: float = 30.0,
) -> FitResult:
    """Maximum-likelihood Poisson regression by Fisher scoring.

    Starts from ``mu = y + 0.1``.  Stops when
    ``|dev - dev_prev| / (|dev| + 0.1) < tol``.  A step that raises the
    deviance is halved up to ``max_halvings`` times.  Any coefficient beyond
    ``coef_bound`` in absolute value is treated as divergence.
    """
    X, y, off = design.X, design.y, design.offset
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DataError("Poisson response must be nonnegative integers")
    if X.shape[1] > X.shape[0]:
        raise DataError(f"more columns ({X.shape[1]}) than rows ({X.shape[0]})")

    mu = y + 0.1
    eta = np.log(mu)
    dev_old = poisson_deviance(y, mu)
    beta = None
    trace = []
    converged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            z = eta - off + (y - mu) / mu
            beta_new = _wls(X, z, mu)
            eta_new = off + X @ beta_new
            mu_new = np.exp(eta_new)
            dev = poisson_deviance(y, mu_new)
            halvings = 0
            while beta is not None and halvings < max_halvings and not (
                np.isfinite(dev) and dev <= dev_old
            ):
                beta_new = 0.5 * (beta_new + beta)
                eta_new = off + X @ beta_new
                mu_new = np.exp(eta_new)
                dev = poisson_deviance(y, mu_new)
                halvings += 1
            if not np.isfinite(dev):
                raise ConvergenceError(f"non-finite deviance at iteration {it}", trace)
            trace.append(dev)
            if np.max(np.abs(beta_new)) > coef_bound:
                worst = int(np.argmax(np.abs(beta_new)))
                raise ConvergenceError(
                    f"coefficient {design.columns[worst]} reached {beta_new[worst]:.3g}; "
                    "separation-like divergence",
                    trace,
                )
            beta, eta, mu = beta_new, eta_new, mu_new
            if abs(dev - dev_old) / (abs(dev) + 0.1) < tol:
                converged = True
                break
            dev_old = dev
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)

    sw = np.sqrt(mu)
    r = linalg.qr(X * sw[:, None], mode="r")[0][: X.shape[1]]
    if np.any(np.diag(r) == 0):
        raise NumericalError("information matrix is singular")
    r_inv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    cov = r_inv @ r_inv.T
    cov = 0.5 * (cov + cov.T)
    cond = float(np.linalg.cond(r) ** 2)
    ll = poisson_log_likelihood(y, mu)
    for a in (beta, cov):
        a.flags.writeable = False
    return FitResult(
        names=design.columns,
        coef=beta,
        cov=cov,
        log_likelihood=ll,
        aic=aic(ll, len(beta)),
        deviance=float(trace[-1]),
        iterations=len(trace),
        converged=True,
        n_used=design.n_rows,
        n_dropped_rows=design.n_dropped_rows,
        dropped_columns=design.dropped_columns,
        trace=tuple(float(d) for d in trace),
        condition_number=cond,
        design=design,
    )


def log_likelihood_and_aic(fit: FitResult) -> tuple[float, float]:
    """Recompute the Poisson log-likelihood and AIC from the coefficients.

    The offset is not a parameter; ``k`` is the number of estimated
    coefficients.
    """
    ll = poisson_log_likelihood(fit.design.y, fit.fitted)
    return ll, aic(ll, fit.n_params)


def score(fit: FitResult, coef=None) -> np.ndarray:
    """Gradient of the log-likelihood, ``X'(y - mu)``."""
    d = fit.design
    beta = fit.coef if coef is None else np.asarray(coef)
    mu = np.exp(d.offset + d.X @ beta)
    return d.X.T @ (d.y - mu)


def standard_errors(fit: FitResult) -> np.ndarray:
    diag = np.diag(fit.cov)
    if np.any(diag < 0):
        bad = [fit.names[i] for i in np.flatnonzero(diag < 0)]
        raise NumericalError(f"negative variance for {bad}")
    if fit.condition_number > NEAR_SINGULAR:
        warnings.warn(
            f"information matrix is near-singular (condition {fit.condition_number:.3g})",
            NearSingularWarning,
            stacklevel=2,
        )
    return np.sqrt(diag)


@dataclass(frozen=True)
class Prediction:
    mu: np.ndarray
    eta: np.ndarray
    se_eta: np.ndarray


def model_rows(fit: FitResult, rows: Sequence) -> np.ndarray:
    """Encode ``rows`` into the fitted (post-aliasing) columns."""
    d = fit.design
    full = _encode(list(rows), d.spec, d.levels)
    pos = {name: j for j, name in enumerate(d.all_columns)}
    return full[:, [pos[c] for c in fit.names]]


def predict(fit: FitResult, rows: Sequence) -> Prediction:
    """Expected deaths with the linear predictor and its delta-method SE."""
    rows = list(rows)
    X = model_rows(fit, rows)
    offset = np.log(np.array([float(r.population) for r in rows]))
    eta = offset + X @ fit.coef
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, fit.cov, X), 0.0))
    return Prediction(np.exp(eta), eta, se)


# -- reports ----------------------------------------------------------------


def coefficient_table(fit: FitResult) -> list[dict]:
    se = np.sqrt(np.maximum(np.diag(fit.cov), 0.0))
    return [
        {"term": name, "estimate": float(b), "std_error": float(s), "z": float(b / s) if s > 0 else math.nan}
        for name, b, s in zip(fit.names, fit.coef, se)
    ]


def fit_report(fit: FitResult) -> dict:
    return {
        "model": fit.design.spec.name,
        "cluster_lags": list(fit.design.spec.cluster_lags),
        "coefficients": coefficient_table(fit),
        "log_likelihood": fit.log_likelihood,
        "aic": fit.aic,
        "deviance": fit.deviance,
        "n_params": fit.n_params,
        "n_used": fit.n_used,
        "n_dropped_rows": fit.n_dropped_rows,
        "dropped_rows": list(fit.design.dropped_rows),
        "aliased_columns": list(fit.dropped_columns),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "convergence_trace": list(fit.trace),
        "condition_number": fit.condition_number,
        "near_singular": fit.condition_number > NEAR_SINGULAR,
    }


def write_fit_report(fit: FitResult, stream) -> None:
    json.dump(fit_report(fit), stream, indent=2)
    stream.write("\n")


def write_coefficient_table(fit: FitResult, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["term", "estimate", "std_error", "z"])
    for row in coefficient_table(fit):
        writer.writerow([row["term"], repr(row["estimate"]), repr(row["std_error"]), repr(row["z"])])
