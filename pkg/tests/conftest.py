import numpy as np
import pytest

from policy_bundles import glm
from policy_bundles.ingest import STATES, CovariateRecord, OutcomeRecord, assemble_panel
from policy_bundles.synthetic import SyntheticConfig, generate_synthetic_panel

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


def two_bundle_config(n_states=20, ratio=0.7, **kw):
    """Two bundles; every state adopts bundle 2 somewhere in the window."""
    base = dict(
        n_states=n_states,
        bundles=(("q00", "q01"), ("q00", "q01", "p00", "p01", "p02")),
        adoption_windows=((2008, 2014),),
        rate_ratios={1: (1.0, ratio)},
    )
    base.update(kw)
    return SyntheticConfig(**base)


def truth_panel(ds, lags=(1,), window=None):
    """Panel whose cluster labels are the planted bundle labels."""
    cfg = ds.config
    window = window or (cfg.start_year, cfg.end_year)
    rows, _ = assemble_panel(ds.outcomes, ds.covariates, ds.truth.labels, window, lags)
    return rows


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic_panel(SyntheticConfig(), seed=11)


@pytest.fixture(scope="session")
def one_lag_fit():
    ds = generate_synthetic_panel(two_bundle_config(), seed=3)
    panel = truth_panel(ds)
    fit = glm.fit_poisson_irls(glm.build_design_matrix(panel, glm.ModelSpec(cluster_lags=(1,))))
    return fit, panel, ds


def full_size_panel(n_clusters=10, seed=0, start=2006, end=2016, history=2001):
    """51 jurisdictions x 11 years x 2 genders with random cluster labels.

    Rows only need to be full rank; the labels carry no signal.
    """
    rng = np.random.default_rng(seed)
    outcomes, covariates, labels = [], [], {}
    for s in STATES:
        pop = float(rng.uniform(5e5, 5e6))
        for y in range(history, end + 1):
            labels[s, y] = int(rng.integers(1, n_clusters + 1))
            covariates.append(CovariateRecord(s, y, float(rng.normal(80, 10)),
                                              float(rng.normal(0.46, 0.02)), float(rng.normal(50, 5))))
            for g in ("Female", "Male"):
                outcomes.append(OutcomeRecord(s, y, g, int(rng.poisson(pop * 1e-4)), int(pop)))
    return outcomes, covariates, labels
