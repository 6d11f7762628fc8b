import json
from dataclasses import replace

import pytest

from policy_bundles.errors import ConfigError
from policy_bundles.ingest import STATES, derive_in_force_years
from policy_bundles.synthetic import SyntheticConfig, generate_synthetic_panel, write_synthetic

from conftest import two_bundle_config


def read_tree(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_same_seed_gives_identical_files(tmp_path):
    cfg = SyntheticConfig(n_states=12)
    write_synthetic(generate_synthetic_panel(cfg, 5), tmp_path / "a")
    write_synthetic(generate_synthetic_panel(cfg, 5), tmp_path / "b")
    write_synthetic(generate_synthetic_panel(cfg, 6), tmp_path / "c")
    a, b, c = (read_tree(tmp_path / x) for x in "abc")
    assert set(a) == {"policies.csv", "outcomes.csv", "covariates.csv", "groups.csv", "truth.json"}
    assert a == b
    assert a["outcomes.csv"] != c["outcomes.csv"]


def test_policies_reproduce_planted_labels(default_dataset):
    ds = default_dataset
    cfg = ds.config
    m = derive_in_force_years(ds.policies, (cfg.history_start, cfg.end_year))
    for key, row in zip(m.row_keys, m.cells):
        in_force = {p for p, flag in zip(m.col_keys, row) if flag}
        assert in_force == set(cfg.bundles[ds.truth.labels[key] - 1]), key


def test_labels_never_move_backwards(default_dataset):
    ds = default_dataset
    for s in STATES[: ds.config.n_states]:
        seq = [ds.truth.labels[s, y] for y in range(ds.config.history_start, ds.config.end_year + 1)]
        assert seq == sorted(seq) and seq[0] == 1


def test_null_effect_outcomes_ignore_adoption():
    # equal rate ratios: two different adoption schedules with the same
    # number of transitions consume the same random draws
    early = {s: ((2004, 1),) for s in STATES[:10]}
    late = {s: ((2012, 1),) for s in STATES[:10]}
    cfg = two_bundle_config(n_states=10, ratio=1.0)
    a = generate_synthetic_panel(replace(cfg, schedule=early), 3)
    b = generate_synthetic_panel(replace(cfg, schedule=late), 3)
    assert a.truth.labels != b.truth.labels
    assert a.outcomes == b.outcomes
    assert a.covariates == b.covariates


def test_single_bundle_config():
    cfg = SyntheticConfig(n_states=3, bundles=(("a", "b"),), adoption_windows=(), rate_ratios={1: (1.0,)})
    ds = generate_synthetic_panel(cfg, 0)
    assert set(ds.truth.labels.values()) == {1}
    assert len(ds.outcomes) == 3 * (cfg.end_year - cfg.history_start + 1) * 2


@pytest.mark.parametrize("change", [
    dict(n_states=0),
    dict(start_year=2010, end_year=2009),
    dict(history_start=2012),
    dict(adoption_windows=((2003, 2008),)),
    dict(rate_ratios={1: (1.0, 0.7)}),
    dict(rate_ratios={1: (1.0, -0.7, 1.0)}),
])
def test_degenerate_configs(change):
    with pytest.raises(ConfigError):
        generate_synthetic_panel(replace(SyntheticConfig(), **change), 0)


def test_suppression(tmp_path):
    cfg = SyntheticConfig(n_states=10, suppress_below=15)
    ds = generate_synthetic_panel(cfg, 1)
    imputed = [r for r in ds.outcomes if r.imputed]
    assert imputed and all(r.deaths == 5 for r in imputed)
    paths = write_synthetic(ds, tmp_path)
    text = paths["outcomes"].read_text()
    assert text.count("Suppressed") == len(imputed)


def test_truth_json(tmp_path, default_dataset):
    paths = write_synthetic(default_dataset, tmp_path)
    truth = json.loads(paths["truth"].read_text())
    assert truth["log_rate_ratios"]["1"]["1"] == 0.0
    assert len(truth["labels"]) == len(default_dataset.truth.labels)
    groups = paths["groups"].read_text().splitlines()
    assert groups[0] == "policy_id,group"
