"""Synthetic policy/outcome/covariate datasets with planted bundle effects.

Outcomes follow a Poisson law whose log-mean has the same structure the
regression fits: log population offset, state and year effects, a male
indicator, covariates, last year's deaths and lagged bundle terms.  The
returned truth lets tests check recovery end to end.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import (
    STATES,
    CovariateRecord,
    OutcomeRecord,
    PolicyRecord,
    write_covariate_records,
    write_outcome_records,
    write_policy_records,
)


def _policies(prefix, lo, hi):
    return tuple(f"{prefix}{i:02d}" for i in range(lo, hi))


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape of a synthetic dataset.

    ``bundles[b]`` is the policy set in force while a state sits in bundle
    ``b``; bundle 0 is where every state starts.  A state enters bundle
    ``b >= 1`` in a year drawn uniformly from ``adoption_windows[b - 1]``
    (entries are forced strictly increasing; entries past ``end_year`` never
    happen).  ``schedule`` overrides the draw with explicit
    ``state -> ((year, bundle), ...)`` transitions.

    ``rate_ratios[lag][b]`` is the multiplicative effect on expected deaths
    of having been in bundle ``b`` ``lag`` years earlier.
    """

    n_states: int = 20
    start_year: int = 2007
    end_year: int = 2016
    history_start: int = 2001
    bundles: tuple = (
        _policies("q", 0, 3),
        _policies("q", 0, 3) + _policies("p", 0, 10),
        _policies("q", 0, 3) + _policies("p", 0, 30),
    )
    adoption_windows: tuple = ((2003, 2008), (2015, 2016))
    schedule: dict | None = None
    rate_ratios: dict = field(default_factory=lambda: {1: (1.0, 0.7, 1.25)})
    baseline_rate: float = 1.2e-4
    male_log_ratio: float = 0.67
    prescribing_effect: float = 0.002
    gini_effect: float = -2.0
    income_effect: float = -0.003
    deaths_lag_effect: float = 1e-4
    state_effect_sd: float = 0.3
    year_trend: float = 0.04
    year_effect_sd: float = 0.02
    population_range: tuple = (500_000, 8_000_000)
    suppress_below: int | None = None
    suppression_fill: int = 5

    def validate(self):
        if not 1 <= self.n_states <= len(STATES):
            raise ConfigError(f"n_states must be in [1, {len(STATES)}]")
        if self.end_year < self.start_year:
            raise ConfigError("empty year range")
        if self.history_start > self.start_year:
            raise ConfigError("history_start must not be after start_year")
        if len(self.bundles) < 1:
            raise ConfigError("at least one bundle is required")
        if self.schedule is None and len(self.adoption_windows) != len(self.bundles) - 1:
            raise ConfigError("need one adoption window per non-initial bundle")
        for lag, ratios in self.rate_ratios.items():
            if int(lag) < 1 or len(ratios) != len(self.bundles):
                raise ConfigError(f"rate_ratios[{lag}] must give one ratio per bundle")
            if any(r <= 0 for r in ratios):
                raise ConfigError("rate ratios must be positive")


@dataclass(frozen=True)
class SyntheticTruth:
    labels: dict  # (state, year) -> bundle label, 1-based
    log_rate_ratios: dict  # lag -> {label: log ratio}
    intercept: float
    state_effects: dict
    year_effects: dict
    male: float
    prescribing_rate: float
    gini: float
    income: float
    deaths_lag: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = [[s, y, b] for (s, y), b in sorted(self.labels.items())]
        d["log_rate_ratios"] = {str(L): {str(b): v for b, v in r.items()} for L, r in self.log_rate_ratios.items()}
        d["year_effects"] = {str(y): v for y, v in self.year_effects.items()}
        return d


@dataclass(frozen=True)
class SyntheticDataset:
    policies: list
    outcomes: list
    covariates: list
    groups: dict
    truth: SyntheticTruth
    config: SyntheticConfig


def _draw_schedule(cfg: SyntheticConfig, states, rng):
    schedule = {}
    for s in states:
        steps, last = [], cfg.history_start - 1
        for b, (lo, hi) in enumerate(cfg.adoption_windows, start=1):
            year = max(int(rng.integers(lo, hi + 1)), last + 1)
            if year <= cfg.end_year:
                steps.append((year, b))
                last = year
        schedule[s] = tuple(steps)
    return schedule


def _label_at(steps, year):
    label = 1
    for y, b in steps:
        if y <= year:
            label = b + 1
    return label


def generate_synthetic_panel(config: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Draw a dataset; the same ``(config, seed)`` always gives the same output."""
    config.validate()
    rng = np.random.default_rng(seed)
    states = STATES[: config.n_states]
    years = range(config.history_start, config.end_year + 1)
    schedule = dict(config.schedule) if config.schedule is not None else _draw_schedule(config, states, rng)

    # policy records: each state moves between bundles on a day within the
    # first 150 days of the transition year, so the 6-month rule flags the
    # new bundle from that year on
    policies = []
    labels = {}
    for s in states:
        steps = tuple(schedule.get(s, ()))
        switch = {y: date(y, 1, 1) + timedelta(days=int(rng.integers(0, 151))) for y, _ in steps}
        for y in years:
            labels[s, y] = _label_at(steps, y)
        all_ids = sorted({p for b in config.bundles for p in b})
        for pid in all_ids:
            on = [pid in config.bundles[labels[s, y] - 1] for y in years]
            y0 = None
            for y, flag in zip(list(years) + [None], on + [False]):
                if flag and y0 is None:
                    y0 = y
                elif not flag and y0 is not None:
                    eff = switch.get(y0, date(config.history_start, 1, 1))
                    thru = None if y is None else switch[y] - timedelta(days=1)
                    policies.append(PolicyRecord(s, pid, eff, thru))
                    y0 = None
    groups = {}
    for b, bundle in enumerate(config.bundles):
        for pid in bundle:
            groups.setdefault(pid, f"group{b}")

    log_rr = {
        int(L): {b + 1: float(np.log(r)) for b, r in enumerate(ratios)}
        for L, ratios in sorted(config.rate_ratios.items())
    }
    intercept = float(np.log(config.baseline_rate))
    state_fx = {s: float(rng.normal(0.0, config.state_effect_sd)) for s in states}
    year_fx = {
        y: float(config.year_trend * (y - config.history_start) + rng.normal(0.0, config.year_effect_sd))
        for y in years
    }
    lo, hi = config.population_range
    covariates, outcomes = [], []
    for s in states:
        pop0 = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        growth = rng.normal(0.006, 0.004)
        rate0, gini0, inc0 = rng.normal(80, 15), rng.normal(0.46, 0.015), rng.normal(52, 8)
        prev = {"Female": 0, "Male": 0}
        for t, y in enumerate(years):
            cov = CovariateRecord(
                s, y,
                round(max(5.0, rate0 - 0.8 * t + rng.normal(0, 3)), 2),
                round(float(np.clip(gini0 + 0.001 * t + rng.normal(0, 0.005), 0.3, 0.65)), 4),
                round(inc0 + 0.8 * t + rng.normal(0, 1.0), 2),
            )
            covariates.append(cov)
            total = pop0 * (1.0 + growth) ** t
            for gender, share, male in (("Female", 0.508, 0.0), ("Male", 0.492, 1.0)):
                pop = int(round(total * share))
                eta = (
                    np.log(pop) + intercept + state_fx[s] + year_fx[y]
                    + config.male_log_ratio * male
                    + config.prescribing_effect * cov.prescribing_rate
                    + config.gini_effect * cov.gini
                    + config.income_effect * cov.income
                    + config.deaths_lag_effect * prev[gender]
                )
                for L, effects in log_rr.items():
                    eta += effects[labels.get((s, y - L), 1)]
                deaths = int(rng.poisson(np.exp(eta)))
                prev[gender] = deaths
                if config.suppress_below is not None and deaths < config.suppress_below:
                    outcomes.append(OutcomeRecord(s, y, gender, config.suppression_fill, pop, True))
                else:
                    outcomes.append(OutcomeRecord(s, y, gender, deaths, pop, False))
    truth = SyntheticTruth(
        labels=labels,
        log_rate_ratios=log_rr,
        intercept=intercept,
        state_effects=state_fx,
        year_effects=year_fx,
        male=config.male_log_ratio,
        prescribing_rate=config.prescribing_effect,
        gini=config.gini_effect,
        income=config.income_effect,
        deaths_lag=config.deaths_lag_effect,
    )
    return SyntheticDataset(policies, outcomes, covariates, groups, truth, config)


def write_synthetic(dataset: SyntheticDataset, directory) -> dict:
    """Write ``policies.csv``, ``outcomes.csv``, ``covariates.csv``,
    ``groups.csv`` and ``truth.json``; returns the paths by name."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("policies", "outcomes", "covariates", "groups")}
    with open(paths["policies"], "w", newline="") as f:
        write_policy_records(dataset.policies, f)
    with open(paths["outcomes"], "w", newline="") as f:
        write_outcome_records(dataset.outcomes, f)
    with open(paths["covariates"], "w", newline="") as f:
        write_covariate_records(dataset.covariates, f)
    with open(paths["groups"], "w", newline="") as f:
        f.write("policy_id,group\n")
        for pid, group in sorted(dataset.groups.items()):
            f.write(f"{pid},{group}\n")
    paths["truth"] = out / "truth.json"
    with open(paths["truth"], "w") as f:
        json.dump(dataset.truth.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return paths
