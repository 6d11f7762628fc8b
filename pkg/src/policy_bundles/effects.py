"""Decision outputs from fitted models: cluster effects, counterfactual
trajectories, lag attenuation and bright-spot rankings."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DataError
from .glm import FitResult, _row_usable, cluster_term, model_rows, predict
from .ingest import PanelObservation


@dataclass(frozen=True)
class EffectEstimate:
    cluster: int
    predicted: float
    lower: float
    upper: float
    se_eta: float
    rate_ratio: float
    ratio_lower: float
    ratio_upper: float


def _fit_rows(fit: FitResult, panel) -> list:
    spec = fit.design.spec
    return [r for r in panel if _row_usable(r, spec)]


def _shared_cluster_levels(fit: FitResult) -> tuple:
    spec, levels = fit.design.spec, fit.design.levels
    if not spec.cluster_lags:
        raise DataError("model has no cluster-lag term")
    common = None
    for L in spec.cluster_lags:
        lv = set(levels[f"cluster.lag{L}"][0])
        common = lv if common is None else common & lv
    return tuple(sorted(common))


def _reference_cluster(fit: FitResult):
    L = fit.design.spec.cluster_lags[0]
    return fit.design.levels[f"cluster.lag{L}"][1]


def state_effects(fit: FitResult) -> dict:
    """State fixed-effect estimates; the reference (and any aliased) state is 0."""
    states, _ = fit.design.levels["state"]
    out = {}
    for s in states:
        name = f"factor(state){s}"
        out[s] = float(fit.coef[fit.index(name)]) if name in fit.names else 0.0
    return out


def median_state(fit: FitResult) -> str:
    """State whose fixed effect is the (lower) median; ties broken by code."""
    ranked = sorted(state_effects(fit).items(), key=lambda kv: (kv[1], kv[0]))
    return ranked[(len(ranked) - 1) // 2][0]


def reference_rows(fit: FitResult, panel, clusters, reference_state=None, reference_year=None):
    """Synthetic rows varying only the cluster: covariates, population and
    lagged deaths at their panel means, gender averaged (male share 0.5)."""
    rows = _fit_rows(fit, panel)
    if not rows:
        raise DataError("no panel rows usable by this fit")
    states, _ = fit.design.levels["state"]
    years, _ = fit.design.levels["year"]
    state = median_state(fit) if reference_state is None else reference_state
    if state not in states:
        raise DataError(f"reference state {state!r} not in fit")
    year = years[(len(years) - 1) // 2] if reference_year is None else int(reference_year)
    if fit.design.spec.year_mode == "categorical" and year not in years:
        raise DataError(f"reference year {year} not in fit")

    def mean(attr):
        return float(np.mean([float(getattr(r, attr)) for r in rows]))

    deaths_lag = float(np.mean([float(r.deaths_lag[1]) for r in rows])) if fit.design.spec.include_deaths_lag else None
    base = PanelObservation(
        state=state, year=year, gender=0.5, deaths=0.0,
        population=mean("population"),
        prescribing_rate=mean("prescribing_rate"), gini=mean("gini"), income=mean("income"),
        deaths_lag={1: deaths_lag},
    )
    return [
        replace(base, cluster_lag={L: c for L in fit.design.spec.cluster_lags}) for c in clusters
    ]


def relative_effects(fit: FitResult, panel, reference_state=None, reference_year=None) -> list[EffectEstimate]:
    """Predicted deaths per cluster with everything else held fixed.

    In a multi-lag model the cluster is held at every lag (a state that has
    sat in the cluster for the whole lag horizon).  Absolute levels depend on
    the reference configuration; the rate ratios against the reference
    cluster do not.
    """
    clusters = _shared_cluster_levels(fit)
    ref = _reference_cluster(fit)
    rows = reference_rows(fit, panel, clusters, reference_state, reference_year)
    pred = predict(fit, rows)
    X = model_rows(fit, rows)
    ref_i = clusters.index(ref)
    out = []
    for i, c in enumerate(clusters):
        eta, se = pred.eta[i], pred.se_eta[i]
        if c == ref:
            ratio = lo = hi = 1.0
        else:
            diff = X[i] - X[ref_i]
            log_ratio = float(diff @ fit.coef)
            se_ratio = float(np.sqrt(max(diff @ fit.cov @ diff, 0.0)))
            ratio = math.exp(log_ratio)
            lo, hi = math.exp(log_ratio - 2 * se_ratio), math.exp(log_ratio + 2 * se_ratio)
        out.append(EffectEstimate(
            cluster=int(c),
            predicted=float(pred.mu[i]),
            lower=float(np.exp(eta - 2 * se)),
            upper=float(np.exp(eta + 2 * se)),
            se_eta=float(se),
            rate_ratio=ratio,
            ratio_lower=lo,
            ratio_upper=hi,
        ))
    return out


@dataclass(frozen=True)
class TrajectoryPoint:
    year: int
    gender: str
    observed: float
    baseline: float
    counterfactual: float


TRAJECTORY_NOTES = {
    "covariates": "observed covariate history is used in simulated years",
    "deaths_lag": "after the first changed year, lagged deaths are the simulation's own rounded predictions",
    "uncertainty": "point trajectory only; no uncertainty is propagated through the lag feed",
}


def counterfactual_trajectory(
    fit: FitResult, panel, state: str, change_year: int, target_cluster: int
) -> list[TrajectoryPoint]:
    """Baseline vs simulated deaths for one state, per gender and year.

    The simulated state enters ``target_cluster`` at ``change_year``: the
    lag-L cluster input switches at ``change_year + L``.  Until the inputs
    first differ from the actual ones the simulation uses the observed lagged
    deaths, so both series coincide exactly before that year.
    """
    spec = fit.design.spec
    if not spec.cluster_lags:
        raise DataError("model has no cluster-lag term")
    for L in spec.cluster_lags:
        if target_cluster not in fit.design.levels[f"cluster.lag{L}"][0]:
            raise DataError(f"cluster {target_cluster} is not a level of cluster.lag{L}")
    rows = [r for r in _fit_rows(fit, panel) if r.state == state]
    if not rows:
        raise DataError(f"state {state!r} has no usable panel rows")
    points = []
    for gender in sorted({r.gender for r in rows}):
        series = sorted((r for r in rows if r.gender == gender), key=lambda r: r.year)
        diverged = False
        previous = None
        for row in series:
            clusters = {
                L: (target_cluster if row.year - L >= change_year else row.cluster_lag[L])
                for L in spec.cluster_lags
            }
            deaths_lag = dict(row.deaths_lag)
            if diverged and previous is not None:
                deaths_lag[1] = int(round(previous))
            sim = replace(row, cluster_lag={**row.cluster_lag, **clusters}, deaths_lag=deaths_lag)
            diverged = diverged or sim != row
            base_mu = float(predict(fit, [row]).mu[0])
            sim_mu = base_mu if sim == row else float(predict(fit, [sim]).mu[0])
            previous = sim_mu
            points.append(TrajectoryPoint(row.year, gender, float(row.deaths), base_mu, sim_mu))
    return points


@dataclass(frozen=True)
class AttenuationPoint:
    lag: int
    coefficient: float
    se: float
    lower: float
    upper: float
    aliased: bool = False


@dataclass(frozen=True)
class AttenuationProfile:
    cluster: int
    is_reference: bool
    points: tuple


def attenuation_profile(fit: FitResult, cluster: int) -> AttenuationProfile:
    """Coefficient of ``cluster`` at each modelled lag with 2-SE bands.

    The reference cluster has no dummy, so its profile is identically zero
    and is returned with ``is_reference=True``.
    """
    spec, levels = fit.design.spec, fit.design.levels
    if not spec.cluster_lags:
        raise DataError("model has no cluster-lag term")
    se = np.sqrt(np.maximum(np.diag(fit.cov), 0.0))
    points = []
    is_ref = True
    for L in spec.cluster_lags:
        lv, ref = levels[f"cluster.lag{L}"]
        if cluster not in lv:
            raise DataError(f"cluster {cluster} is not a level of cluster.lag{L}")
        if cluster == ref:
            points.append(AttenuationPoint(L, 0.0, 0.0, 0.0, 0.0))
            continue
        is_ref = False
        name = cluster_term(L, cluster)
        if name not in fit.names:
            points.append(AttenuationPoint(L, 0.0, float("nan"), float("nan"), float("nan"), True))
            continue
        i = fit.index(name)
        b, s = float(fit.coef[i]), float(se[i])
        points.append(AttenuationPoint(L, b, s, b - 2 * s, b + 2 * s))
    return AttenuationProfile(int(cluster), is_ref, tuple(points))


@dataclass(frozen=True)
class BrightSpotScore:
    state: str
    score: float
    n_rows: int
    rank: int
    flag: str = ""


def pearson_residuals(y, mu) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return (y - mu) / np.sqrt(mu)


def rank_bright_spots(states: Sequence[str], y, mu, m: int = 5) -> list[BrightSpotScore]:
    """Rank states by mean Pearson residual, most negative first.

    The first ``m`` are flagged ``"bright"`` (fewer deaths than predicted),
    the last ``m`` ``"lagging"``; equal scores are ordered by state code.
    """
    res = pearson_residuals(y, mu)
    states = np.asarray(states)
    scores = []
    for s in sorted(set(states.tolist())):
        mask = states == s
        scores.append((float(res[mask].mean()), s, int(mask.sum())))
    scores.sort()
    n = len(scores)
    out = []
    for rank, (score, s, count) in enumerate(scores, start=1):
        flag = "bright" if rank <= m else ("lagging" if rank > n - m else "")
        out.append(BrightSpotScore(s, score, count, rank, flag))
    return out


def bright_spots(fit: FitResult, panel=None, m: int = 5) -> list[BrightSpotScore]:
    """Bright-spot ranking over the fitted rows, or over ``panel`` rows
    predicted by ``fit`` when a panel is given."""
    if panel is None:
        states = [k[0] for k in fit.design.row_keys]
        return rank_bright_spots(states, fit.design.y, fit.fitted, m)
    rows = _fit_rows(fit, panel)
    pred = predict(fit, rows)
    return rank_bright_spots([r.state for r in rows], [r.deaths for r in rows], pred.mu, m)


# -- exports ----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return int(v)
    return v


def write_table(records: Sequence, stream) -> None:
    """Dataclass records as a CSV table, one row per record."""
    writer = csv.writer(stream, lineterminator="\n")
    if not records:
        return
    columns = list(asdict(records[0]))
    writer.writerow(columns)
    for r in records:
        d = asdict(r)
        writer.writerow([_fmt(d[c]) for c in columns])


def write_attenuation(profile: AttenuationProfile, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["cluster", "is_reference", "lag", "coefficient", "se", "lower", "upper", "aliased"])
    for p in profile.points:
        writer.writerow([profile.cluster, int(profile.is_reference), p.lag, repr(p.coefficient),
                         repr(p.se), repr(p.lower), repr(p.upper), int(p.aliased)])


def dump_json(obj, stream) -> None:
    def default(o):
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    json.dump(obj, stream, indent=2, default=default, allow_nan=True)
    stream.write("\n")
