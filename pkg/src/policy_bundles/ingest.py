"""Parsing and cleaning of policy, outcome and covariate files, plus panel assembly.

All readers take an open text stream holding comma-separated rows.  A header
row is optional; when present it must spell the documented column names.

    policies    state,policy_id,effective_date,valid_through
    outcomes    state,year,gender,deaths,population
    covariates  state,year,prescribing_rate,gini,income
    groups      policy_id,group
"""
from __future__ import annotations

import calendar
import csv
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, IngestError

STATES = (
    "AK", "AL", "AR", "AZ", "CA", "CO", "CT", "DC", "DE", "FL", "GA", "HI",
    "IA", "ID", "IL", "IN", "KS", "KY", "LA", "MA", "MD", "ME", "MI", "MN",
    "MO", "MS", "MT", "NC", "ND", "NE", "NH", "NJ", "NM", "NV", "NY", "OH",
    "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT", "VA", "VT", "WA",
    "WI", "WV", "WY",
)
_STATE_SET = frozenset(STATES)
GENDERS = ("Female", "Male")
SUPPRESSED = "Suppressed"

POLICY_COLUMNS = ("state", "policy_id", "effective_date", "valid_through")
OUTCOME_COLUMNS = ("state", "year", "gender", "deaths", "population")
COVARIATE_COLUMNS = ("state", "year", "prescribing_rate", "gini", "income")
GROUP_COLUMNS = ("policy_id", "group")

_OPEN_END = date.max


@dataclass(frozen=True)
class PolicyRecord:
    state: str
    policy_id: str
    effective_date: date
    valid_through: date | None = None

    def __post_init__(self):
        if self.state not in _STATE_SET:
            raise DataError(f"unknown jurisdiction {self.state!r}")
        if self.valid_through is not None and self.valid_through < self.effective_date:
            raise DataError(
                f"inverted interval for {self.state}/{self.policy_id}: "
                f"{self.effective_date} > {self.valid_through}"
            )


@dataclass(frozen=True, eq=False)
class StateYearPolicyMatrix:
    """Binary in-force matrix; rows are (state, year), columns are policy ids."""

    row_keys: tuple
    col_keys: tuple
    cells: np.ndarray

    def __post_init__(self):
        row_keys = tuple((str(s), int(y)) for s, y in self.row_keys)
        col_keys = tuple(str(c) for c in self.col_keys)
        cells = np.array(self.cells, dtype=np.uint8, copy=True).reshape(len(row_keys), len(col_keys))
        if len(set(row_keys)) != len(row_keys):
            raise DataError("duplicate row keys in policy matrix")
        if len(set(col_keys)) != len(col_keys):
            raise DataError("duplicate column keys in policy matrix")
        if cells.size and cells.max() > 1:
            raise DataError("policy matrix cells must be 0 or 1")
        cells.flags.writeable = False
        object.__setattr__(self, "row_keys", row_keys)
        object.__setattr__(self, "col_keys", col_keys)
        object.__setattr__(self, "cells", cells)

    @property
    def shape(self):
        return self.cells.shape

    def __eq__(self, other):
        if not isinstance(other, StateYearPolicyMatrix):
            return NotImplemented
        return (
            self.row_keys == other.row_keys
            and self.col_keys == other.col_keys
            and np.array_equal(self.cells, other.cells)
        )

    def select_rows(self, keys: Iterable) -> StateYearPolicyMatrix:
        index = {k: i for i, k in enumerate(self.row_keys)}
        keys = [(str(s), int(y)) for s, y in keys]
        missing = [k for k in keys if k not in index]
        if missing:
            raise DataError(f"rows not in policy matrix: {missing[:5]}")
        idx = [index[k] for k in keys]
        return StateYearPolicyMatrix(tuple(keys), self.col_keys, self.cells[idx])

    def select_years(self, start: int, end: int) -> StateYearPolicyMatrix:
        return self.select_rows(k for k in self.row_keys if start <= k[1] <= end)


@dataclass(frozen=True)
class OutcomeRecord:
    state: str
    year: int
    gender: str
    deaths: int
    population: int
    imputed: bool = False


@dataclass(frozen=True)
class CovariateRecord:
    state: str
    year: int
    prescribing_rate: float
    gini: float
    income: float


@dataclass(frozen=True)
class PanelObservation:
    state: str
    year: int
    gender: str
    deaths: float
    population: float
    prescribing_rate: float
    gini: float
    income: float
    deaths_lag: dict = field(default_factory=dict)
    cluster_lag: dict = field(default_factory=dict)
    complete: bool = True


# -- low-level reading ------------------------------------------------------


def _rows(stream, columns: Sequence[str]) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(line_number, fields)`` skipping blank lines and an optional header."""
    reader = csv.reader(stream)
    first = True
    for fields in reader:
        line = reader.line_num
        if not fields or all(not f.strip() for f in fields):
            continue
        fields = [f.strip() for f in fields]
        if first:
            first = False
            if [f.lower() for f in fields[: len(columns)]] == list(columns):
                continue
        if len(fields) == len(columns) - 1 and columns[-1] == "valid_through":
            fields.append("")
        if len(fields) != len(columns):
            raise IngestError(f"expected {len(columns)} fields, got {len(fields)}", line)
        yield line, fields


def _parse_date(text: str, line: int) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise IngestError(f"malformed date {text!r}", line) from None


def _parse_state(text: str, line: int) -> str:
    if text not in _STATE_SET:
        raise IngestError(f"unknown jurisdiction {text!r}", line)
    return text


def _parse_int(text: str, name: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise IngestError(f"{name} is not an integer: {text!r}", line) from None


def _parse_float(text: str, name: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"{name} is not a number: {text!r}", line) from None


# -- policies ---------------------------------------------------------------


def parse_policy_records(stream) -> list[PolicyRecord]:
    """Read dated law records.  An empty ``valid_through`` means still in force."""
    records = []
    for line, (state, policy_id, eff, thru) in _rows(stream, POLICY_COLUMNS):
        state = _parse_state(state, line)
        if not policy_id:
            raise IngestError("empty policy_id", line)
        effective = _parse_date(eff, line)
        through = _parse_date(thru, line) if thru else None
        if through is not None and through < effective:
            raise IngestError(
                f"inverted interval: effective {effective} after valid_through {through}", line
            )
        records.append(PolicyRecord(state, policy_id, effective, through))
    return records


def write_policy_records(records: Iterable[PolicyRecord], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(POLICY_COLUMNS)
    for r in records:
        thru = r.valid_through.isoformat() if r.valid_through else ""
        writer.writerow([r.state, r.policy_id, r.effective_date.isoformat(), thru])


def _merge_intervals(intervals):
    merged = []
    for start, end in sorted(intervals):
        if merged and (merged[-1][1] == _OPEN_END or start <= merged[-1][1] + timedelta(days=1)):
            if end > merged[-1][1]:
                merged[-1][1] = end
        else:
            merged.append([start, end])
    return merged


def covered_days(intervals, year: int) -> int:
    """Days of calendar ``year`` covered by the union of inclusive date intervals.

    ``None`` as an interval end means open-ended.
    """
    jan1, dec31 = date(year, 1, 1), date(year, 12, 31)
    total = 0
    for start, end in _merge_intervals((s, e or _OPEN_END) for s, e in intervals):
        lo, hi = max(start, jan1), min(end, dec31)
        if hi >= lo:
            total += (hi - lo).days + 1
    return total


def in_force(intervals, year: int) -> bool:
    """True when the law covers strictly more than half of ``year``."""
    days_in_year = 366 if calendar.isleap(year) else 365
    return 2 * covered_days(intervals, year) > days_in_year


def derive_in_force_years(
    records: Iterable[PolicyRecord],
    year_range: tuple[int, int],
    states: Sequence[str] | None = None,
    policy_ids: Sequence[str] | None = None,
) -> StateYearPolicyMatrix:
    """Convert dated records into a state-year binary matrix.

    Multiple records for one (state, policy) are unioned before counting
    days.  Rows are ordered state-major then by year; by default the states
    and policies are those seen in ``records``, sorted.  A (state, policy)
    pair with no record is 0 everywhere.
    """
    start, end = year_range
    if end < start:
        raise DataError(f"empty year range {year_range}")
    records = list(records)
    intervals: dict[tuple[str, str], list] = {}
    for r in records:
        intervals.setdefault((r.state, r.policy_id), []).append((r.effective_date, r.valid_through))
    if states is None:
        states = sorted({r.state for r in records})
    if policy_ids is None:
        policy_ids = sorted({r.policy_id for r in records})
    years = range(start, end + 1)
    col = {p: j for j, p in enumerate(policy_ids)}
    row = {(s, y): i for i, (s, y) in enumerate((s, y) for s in states for y in years)}
    cells = np.zeros((len(row), len(col)), dtype=np.uint8)
    for (state, pid), spans in intervals.items():
        if pid not in col or (state, start) not in row:
            continue
        for y in years:
            if in_force(spans, y):
                cells[row[state, y], col[pid]] = 1
    return StateYearPolicyMatrix(tuple(row), tuple(policy_ids), cells)


def filter_policy_variables(matrix: StateYearPolicyMatrix, excluded_ids: Iterable[str] = ()):
    """Drop excluded and zero-variance columns.

    Returns ``(filtered_matrix, removed)`` where ``removed`` lists
    ``(policy_id, cause)`` with cause ``"excluded"`` or ``"fixed"`` in the
    original column order.
    """
    if matrix.cells.size == 0:
        raise DataError("cannot filter an empty policy matrix")
    excluded = set(excluded_ids)
    for pid in sorted(excluded - set(matrix.col_keys)):
        warnings.warn(f"excluded policy {pid!r} not present in matrix", stacklevel=2)
    cells = matrix.cells
    constant = cells.min(axis=0) == cells.max(axis=0)
    keep, removed = [], []
    for j, pid in enumerate(matrix.col_keys):
        if pid in excluded:
            removed.append((pid, "excluded"))
        elif constant[j]:
            removed.append((pid, "fixed"))
        else:
            keep.append(j)
    filtered = StateYearPolicyMatrix(
        matrix.row_keys, tuple(matrix.col_keys[j] for j in keep), cells[:, keep]
    )
    return filtered, removed


def write_policy_matrix(matrix: StateYearPolicyMatrix, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["state", "year", *matrix.col_keys])
    for (state, year), values in zip(matrix.row_keys, matrix.cells):
        writer.writerow([state, year, *values.tolist()])


def parse_policy_groups(stream) -> dict[str, str]:
    groups = {}
    for line, (pid, group) in _rows(stream, GROUP_COLUMNS):
        if pid in groups and groups[pid] != group:
            raise IngestError(f"policy {pid!r} assigned to two groups", line)
        groups[pid] = group
    return groups


def parse_exclusions(stream) -> list[str]:
    """One policy id per line; ``#`` starts a comment."""
    ids = []
    for raw in stream:
        text = raw.split("#", 1)[0].strip()
        if text and text.lower() != "policy_id":
            ids.append(text.split(",", 1)[0].strip())
    return ids


# -- outcomes and covariates ------------------------------------------------


def parse_outcome_records(stream, suppression_fill: int = 5) -> list[OutcomeRecord]:
    """Read yearly death counts, replacing ``Suppressed`` tokens by ``suppression_fill``."""
    records = []
    for line, (state, year, gender, deaths, pop) in _rows(stream, OUTCOME_COLUMNS):
        state = _parse_state(state, line)
        year = _parse_int(year, "year", line)
        if gender not in GENDERS:
            raise IngestError(f"gender must be Female or Male, got {gender!r}", line)
        imputed = deaths == SUPPRESSED
        n = suppression_fill if imputed else _parse_int(deaths, "deaths", line)
        if n < 0:
            raise IngestError(f"negative deaths {n}", line)
        population = _parse_int(pop, "population", line)
        if population <= 0:
            raise IngestError(f"nonpositive population {population}", line)
        records.append(OutcomeRecord(state, year, gender, n, population, imputed))
    return records


def write_outcome_records(records: Iterable[OutcomeRecord], stream) -> None:
    """Imputed records are written back as the ``Suppressed`` token."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(OUTCOME_COLUMNS)
    for r in records:
        deaths = SUPPRESSED if r.imputed else r.deaths
        writer.writerow([r.state, r.year, r.gender, deaths, r.population])


def parse_covariate_records(stream) -> list[CovariateRecord]:
    records = []
    for line, (state, year, rate, gini, income) in _rows(stream, COVARIATE_COLUMNS):
        state = _parse_state(state, line)
        year = _parse_int(year, "year", line)
        rate = _parse_float(rate, "prescribing_rate", line)
        gini = _parse_float(gini, "gini", line)
        income = _parse_float(income, "income", line)
        if not rate >= 0:
            raise IngestError(f"negative prescribing_rate {rate}", line)
        if not 0 < gini < 1:
            raise IngestError(f"gini outside (0, 1): {gini}", line)
        records.append(CovariateRecord(state, year, rate, gini, income))
    return records


def write_covariate_records(records: Iterable[CovariateRecord], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COVARIATE_COLUMNS)
    for r in records:
        writer.writerow([r.state, r.year, repr(r.prescribing_rate), repr(r.gini), repr(r.income)])


# -- panel assembly ---------------------------------------------------------


def assemble_panel(
    outcomes: Iterable[OutcomeRecord],
    covariates: Iterable[CovariateRecord],
    cluster_assignments: Mapping,
    year_range: tuple[int, int],
    lags: Sequence[int] = (1,),
    deaths_lags: Sequence[int] = (1,),
):
    """Join outcomes, covariates and lagged cluster labels.

    One row per (state, year, gender) outcome inside ``year_range``.  Lags
    are looked up in the full outcome history and the full cluster
    assignment, so pre-window years feed the first window years.  Rows
    lacking any lag are kept with ``complete=False``.

    Returns ``(rows, report)``; ``report`` counts matched and unmatched keys.
    """
    start, end = year_range
    if end < start:
        raise DataError(f"empty year range {year_range}")
    lags = tuple(sorted(set(int(x) for x in lags)))
    deaths_lags = tuple(sorted(set(int(x) for x in deaths_lags)))
    if any(x < 1 for x in lags + deaths_lags):
        raise DataError("lags must be positive integers")

    history: dict[tuple[str, str, int], OutcomeRecord] = {}
    for r in outcomes:
        key = (r.state, r.gender, r.year)
        if key in history:
            raise DataError(f"duplicate outcome record for {r.state} {r.year} {r.gender}")
        history[key] = r
    cov: dict[tuple[str, int], CovariateRecord] = {}
    for c in covariates:
        if (c.state, c.year) in cov:
            raise DataError(f"duplicate covariate record for {c.state} {c.year}")
        cov[c.state, c.year] = c

    in_window = sorted(
        (k for k in history if start <= k[2] <= end), key=lambda k: (k[0], k[2], k[1])
    )
    rows = []
    missing_deaths = {L: 0 for L in deaths_lags}
    missing_cluster = {L: 0 for L in lags}
    used_cov = set()
    for state, gender, year in in_window:
        r = history[state, gender, year]
        c = cov.get((state, year))
        if c is None:
            raise DataError(f"covariates missing for state={state} year={year}")
        used_cov.add((state, year))
        d_lag, c_lag = {}, {}
        for L in deaths_lags:
            prev = history.get((state, gender, year - L))
            d_lag[L] = None if prev is None else prev.deaths
            missing_deaths[L] += prev is None
        for L in lags:
            label = cluster_assignments.get((state, year - L))
            c_lag[L] = None if label is None else int(label)
            missing_cluster[L] += label is None
        complete = all(v is not None for v in d_lag.values()) and all(
            v is not None for v in c_lag.values()
        )
        rows.append(
            PanelObservation(
                state, year, gender, r.deaths, r.population,
                c.prescribing_rate, c.gini, c.income, d_lag, c_lag, complete,
            )
        )
    unused = sorted(k for k in cov if start <= k[1] <= end and k not in used_cov)
    report = {
        "n_rows": len(rows),
        "n_complete": sum(r.complete for r in rows),
        "n_incomplete": sum(not r.complete for r in rows),
        "outcome_records_total": len(history),
        "outcome_records_outside_window": len(history) - len(rows),
        "covariate_keys_matched": len(used_cov),
        "covariate_keys_unmatched": [f"{s}:{y}" for s, y in unused],
        "deaths_lag_missing": {str(L): n for L, n in missing_deaths.items()},
        "cluster_lag_missing": {str(L): n for L, n in missing_cluster.items()},
        "incomplete_rows": [f"{r.state}:{r.year}:{r.gender}" for r in rows if not r.complete],
    }
    return rows, report


def panel_columns(lags: Sequence[int], deaths_lags: Sequence[int] = (1,)) -> list[str]:
    return [
        "state", "year", "gender", "deaths", "population",
        "prescribing_rate", "gini", "income",
        *(f"deaths_lag{L}" for L in sorted(deaths_lags)),
        *(f"cluster_lag{L}" for L in sorted(lags)),
        "complete",
    ]


def write_panel(rows: Sequence[PanelObservation], stream, lags, deaths_lags=(1,)) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(panel_columns(lags, deaths_lags))

    def fmt(v):
        return "" if v is None else v

    for r in rows:
        writer.writerow([
            r.state, r.year, r.gender, r.deaths, r.population,
            repr(float(r.prescribing_rate)), repr(float(r.gini)), repr(float(r.income)),
            *(fmt(r.deaths_lag.get(L)) for L in sorted(deaths_lags)),
            *(fmt(r.cluster_lag.get(L)) for L in sorted(lags)),
            int(r.complete),
        ])
