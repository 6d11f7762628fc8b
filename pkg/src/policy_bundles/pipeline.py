"""Stage orchestration, run configuration and output manifests."""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from . import cluster as cl
from . import effects as fx
from . import glm
from . import ingest as ig
from .errors import ConfigError, DataError, PolicyBundleError
from .synthetic import SyntheticConfig, generate_synthetic_panel, write_synthetic

log = logging.getLogger(__name__)

COMMANDS = ("ingest", "cluster", "fit", "effects", "simulate", "brightspots", "synth", "pipeline")
INPUT_FIELDS = ("policies", "outcomes", "covariates", "groups", "exclusions")
# execution-only settings; they never change results and stay out of the manifest
_NOT_ECHOED = ("out", "workers")


@dataclass
class RunConfig:
    policies: str | None = None
    outcomes: str | None = None
    covariates: str | None = None
    groups: str | None = None
    exclusions: str | None = None
    start_year: int = 2006
    end_year: int = 2016
    cluster_start_year: int | None = None
    k: Any = 10
    k_grid: tuple = (4, 20)
    elbow_k_max: int = 30
    binary_mode: str = "symmetric"
    lags: tuple = (1,)
    attenuation_lags: tuple = (1, 2, 3, 4, 5)
    sensitivity: bool = False
    suppression_fill: int = 5
    reference_levels: dict = field(default_factory=dict)
    counterfactual: dict = field(default_factory=dict)
    attenuation_cluster: int | None = None
    bright_spot_m: int = 5
    out: str = "out"
    seed: int = 0
    synthetic: dict = field(default_factory=dict)
    workers: int = 1

    def validate(self, command: str = "pipeline") -> RunConfig:
        if self.end_year < self.start_year:
            raise ConfigError(f"empty analysis window {self.start_year}-{self.end_year}")
        if self.k != "auto":
            if not isinstance(self.k, int) or self.k < 1:
                raise ConfigError(f"k must be a positive integer or 'auto', got {self.k!r}")
        if any(not isinstance(k, int) or k < 1 for k in self.k_grid):
            raise ConfigError("k_grid entries must be positive integers")
        if self.binary_mode not in cl.BINARY_MODES:
            raise ConfigError(f"binary_mode must be one of {cl.BINARY_MODES}")
        if command in ("fit", "effects", "simulate", "brightspots", "pipeline"):
            if not self.lags:
                raise ConfigError("lag set must be nonempty")
        if any(not isinstance(L, int) or L < 1 for L in (*self.lags, *self.attenuation_lags)):
            raise ConfigError("lags must be positive integers")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.suppression_fill < 0:
            raise ConfigError("suppression_fill must be nonnegative")
        if command not in ("synth",):
            for name in ("policies", "outcomes", "covariates"):
                if getattr(self, name) is None:
                    raise ConfigError(f"missing required input path {name!r}")
        return self

    def echo(self) -> dict:
        d = asdict(self)
        for key in _NOT_ECHOED:
            d.pop(key)
        for name in INPUT_FIELDS:
            if d[name] is not None:
                d[name] = Path(d[name]).name
        d["k_grid"] = list(self.k_grid)
        d["lags"] = list(self.lags)
        d["attenuation_lags"] = list(self.attenuation_lags)
        return d


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config; relative input paths resolve against its directory.
    ``None`` overrides are ignored."""
    data: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        base = path.parent
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for name in INPUT_FIELDS:
        if data.get(name) is not None:
            p = Path(data[name])
            data[name] = str(p if p.is_absolute() else base / p)
    data.update({k: v for k, v in overrides.items() if v is not None})
    for name in ("k_grid", "lags", "attenuation_lags"):
        if name in data:
            data[name] = tuple(data[name])
    try:
        return RunConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from None


class StageError(PolicyBundleError):
    def __init__(self, stage: str, error: Exception):
        self.stage = stage
        self.error = error
        super().__init__(f"[{stage}] {error}")


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except PolicyBundleError as e:
        raise StageError(name, e) from e
    except FileNotFoundError as e:
        raise StageError(name, DataError(f"input file not found: {e.filename}")) from e


def _open(path):
    return open(path, newline="")


# -- stages -----------------------------------------------------------------


@dataclass
class IngestResult:
    policies: list
    outcomes: list
    covariates: list
    groups: dict
    exclusions: list
    matrix: ig.StateYearPolicyMatrix
    removed: list
    cluster_years: tuple


def run_ingest(cfg: RunConfig) -> IngestResult:
    with stage("ingest"):
        with _open(cfg.policies) as f:
            policies = ig.parse_policy_records(f)
        with _open(cfg.outcomes) as f:
            outcomes = ig.parse_outcome_records(f, cfg.suppression_fill)
        with _open(cfg.covariates) as f:
            covariates = ig.parse_covariate_records(f)
        groups = {}
        if cfg.groups:
            with _open(cfg.groups) as f:
                groups = ig.parse_policy_groups(f)
        exclusions = []
        if cfg.exclusions:
            with _open(cfg.exclusions) as f:
                exclusions = ig.parse_exclusions(f)
        if not outcomes:
            raise DataError("outcome file has no records")
        if not policies:
            raise DataError("policy file has no records")
        states = sorted({r.state for r in outcomes})
        deepest = max((*cfg.lags, *cfg.attenuation_lags))
        first = min(r.effective_date.year for r in policies)
        start = cfg.cluster_start_year
        if start is None:
            start = min(first, cfg.start_year - deepest)
        full = ig.derive_in_force_years(policies, (start, cfg.end_year), states=states)
        analysis = full.select_years(cfg.start_year, cfg.end_year)
        _, removed = ig.filter_policy_variables(analysis, exclusions)
        drop = {pid for pid, _ in removed}
        keep = [j for j, pid in enumerate(full.col_keys) if pid not in drop]
        if not keep:
            raise DataError("no policy variables left after filtering")
        matrix = ig.StateYearPolicyMatrix(
            full.row_keys, tuple(full.col_keys[j] for j in keep), full.cells[:, keep]
        )
        log.info("policy matrix %d x %d (%d removed)", *matrix.shape, len(removed))
        return IngestResult(policies, outcomes, covariates, groups, exclusions, matrix, removed,
                            (start, cfg.end_year))


@dataclass
class ClusterResult:
    D: cl.DissimilarityMatrix
    dendrogram: cl.Dendrogram
    elbow: cl.ElbowCurve
    k: int
    assignment: cl.ClusterAssignment
    profiles: list
    sensitivity: dict


def run_cluster(cfg: RunConfig, ing: IngestResult) -> ClusterResult:
    with stage("cluster"):
        D = cl.gower_dissimilarity(ing.matrix, cfg.binary_mode, workers=cfg.workers)
        tree = cl.agglomerate_complete_linkage(D)
        n = tree.n_leaves
        elbow = cl.elbow_curve(tree, D, (1, min(n, cfg.elbow_k_max)))
        if cfg.k == "auto":
            if elbow.suggested_k is None:
                raise ConfigError("k='auto' but the elbow curve gives no suggestion")
            k = elbow.suggested_k
        else:
            k = cfg.k
        assignment = cl.cut_tree(tree, k)
        profiles = cl.summarize_clusters(assignment, ing.matrix, ing.groups)
        sens = {kk: cl.cut_tree(tree, kk) for kk in cfg.k_grid} if cfg.sensitivity else {}
        log.info("k=%d (elbow suggests %s); sizes %s", k, elbow.suggested_k, assignment.counts())
        return ClusterResult(D, tree, elbow, k, assignment, profiles, sens)


@dataclass
class FitStage:
    panel: list
    panel_report: dict
    panel_lags: tuple
    fits: dict


def _model_specs(cfg: RunConfig, k: int):
    """(name, k, lags) for every model to fit; lags () is the no-cluster base."""
    specs = [("base", k, ()), ("main", k, tuple(cfg.lags)), ("dissipate", k, tuple(cfg.attenuation_lags))]
    if cfg.sensitivity:
        specs.append(("lag2", k, (2,)))
        for kk in cfg.k_grid:
            specs.append((f"k{kk}", kk, tuple(cfg.lags)))
            specs.append((f"k{kk}_dissipate", kk, tuple(cfg.attenuation_lags)))
    return specs


def run_fit(cfg: RunConfig, ing: IngestResult, clu: ClusterResult) -> FitStage:
    with stage("fit"):
        specs = _model_specs(cfg, clu.k)
        all_lags = tuple(sorted({L for _, _, lags in specs for L in lags}))
        window = (cfg.start_year, cfg.end_year)
        panels = {}
        for kk in sorted({kk for _, kk, _ in specs}):
            assignment = clu.assignment if kk == clu.k else clu.sensitivity[kk]
            panels[kk] = ig.assemble_panel(ing.outcomes, ing.covariates, assignment, window, all_lags)
        panel, report = panels[clu.k]
        fits = {}
        for name, kk, lags in specs:
            spec = glm.ModelSpec(cluster_lags=lags, reference_levels=dict(cfg.reference_levels), name=name)
            design = glm.build_design_matrix(panels[kk][0], spec, drop_incomplete=True)
            fits[name] = glm.fit_poisson_irls(design)
            f = fits[name]
            log.info("fit %s: %d params, logL %.3f, AIC %.3f, n=%d (%d dropped)",
                     name, f.n_params, f.log_likelihood, f.aic, f.n_used, f.n_dropped_rows)
        return FitStage(panel, report, all_lags, fits)


def best_cluster(fit: glm.FitResult, panel) -> int:
    """Cluster with the lowest rate ratio against the reference."""
    effects = fx.relative_effects(fit, panel)
    return min(effects, key=lambda e: (e.rate_ratio, e.cluster)).cluster


def run_effects(cfg: RunConfig, fs: FitStage):
    with stage("effects"):
        main = fs.fits["main"]
        effects = fx.relative_effects(
            main, fs.panel,
            reference_state=cfg.counterfactual.get("reference_state"),
            reference_year=cfg.counterfactual.get("reference_year"),
        )
        target = cfg.attenuation_cluster
        if target is None:
            target = min(effects, key=lambda e: (e.rate_ratio, e.cluster)).cluster
        profile = fx.attenuation_profile(fs.fits["dissipate"], target)
        return effects, profile


def run_simulate(cfg: RunConfig, fs: FitStage):
    with stage("simulate"):
        main = fs.fits["main"]
        states = main.design.levels["state"][0]
        cf = cfg.counterfactual
        state = cf.get("state") or ("WA" if "WA" in states else states[0])
        change_year = int(cf.get("change_year") or min(cfg.start_year + 4, cfg.end_year))
        target = cf.get("target_cluster")
        if target is None:
            target = best_cluster(main, fs.panel)
        out = {}
        for name in ("main", "dissipate"):
            out[name] = fx.counterfactual_trajectory(fs.fits[name], fs.panel, state, change_year, int(target))
        meta = {"state": state, "change_year": change_year, "target_cluster": int(target), **fx.TRAJECTORY_NOTES}
        return out, meta


def run_brightspots(cfg: RunConfig, fs: FitStage):
    with stage("brightspots"):
        return fx.bright_spots(fs.fits["main"], m=cfg.bright_spot_m)


# -- writing ----------------------------------------------------------------


class OutputDir:
    """Collects output files so the manifest can hash exactly what was written."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def text(self, name: str, writer, *args):
        buf = io.StringIO()
        writer(*args, buf)
        (self.path / name).write_text(buf.getvalue())
        self.files.append(name)

    def json(self, name: str, obj):
        self.text(name, lambda o, s: fx.dump_json(o, s), obj)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: OutputDir, command: str, cfg: RunConfig) -> None:
    inputs = {}
    for name in INPUT_FIELDS:
        p = getattr(cfg, name)
        if p is not None:
            inputs[name] = {"path": Path(p).name, "sha256": _sha256(p)}
    manifest = {
        "command": command,
        "config": cfg.echo(),
        "inputs": inputs,
        "outputs": {name: _sha256(out.path / name) for name in sorted(out.files)},
        "versions": {
            "policy_bundles": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    with open(out.path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_ingest(out: OutputDir, ing: IngestResult):
    out.text("policy_matrix.csv", ig.write_policy_matrix, ing.matrix)

    def removed(rows, s):
        s.write("policy_id,cause\n")
        for pid, cause in rows:
            s.write(f"{pid},{cause}\n")

    out.text("removed_policies.csv", removed, ing.removed)
    out.json("ingest_report.json", {
        "n_policy_records": len(ing.policies),
        "n_outcome_records": len(ing.outcomes),
        "n_suppressed_imputed": sum(r.imputed for r in ing.outcomes),
        "n_covariate_records": len(ing.covariates),
        "cluster_years": list(ing.cluster_years),
        "matrix_shape": list(ing.matrix.shape),
        "removed": [{"policy_id": p, "cause": c} for p, c in ing.removed],
    })


def _write_cluster(out: OutputDir, clu: ClusterResult):
    out.text("distance.csv", cl.write_dissimilarity, clu.D)
    out.text("dendrogram.csv", cl.write_dendrogram, clu.dendrogram)
    out.text("clusters.csv", cl.write_assignment, clu.assignment)
    out.text("elbow.csv", cl.write_elbow, clu.elbow)
    out.json("profiles.json", {"k": clu.k, "suggested_k": clu.elbow.suggested_k,
                               "clusters": cl.profiles_to_dict(clu.profiles)})
    for kk, a in sorted(clu.sensitivity.items()):
        out.text(f"clusters_k{kk}.csv", cl.write_assignment, a)


def _write_fit(out: OutputDir, fs: FitStage):
    out.text("panel.csv", lambda rows, s: ig.write_panel(rows, s, fs.panel_lags), fs.panel)
    out.json("panel_report.json", fs.panel_report)
    for name, fit in fs.fits.items():
        out.text(f"fit_{name}.json", glm.write_fit_report, fit)
        out.text(f"coef_{name}.csv", glm.write_coefficient_table, fit)


def _write_effects(out: OutputDir, effects, profile):
    out.text("effects.csv", fx.write_table, effects)
    out.json("effects.json", {"effects": effects,
                              "note": "absolute levels depend on the reference configuration; rate ratios do not"})
    out.text("attenuation.csv", fx.write_attenuation, profile)
    out.json("attenuation.json", profile)


def _write_simulate(out: OutputDir, trajectories, meta):
    def table(data, s):
        s.write("model,year,gender,observed,baseline,counterfactual\n")
        for name, points in data.items():
            for p in points:
                s.write(f"{name},{p.year},{p.gender},{p.observed!r},{p.baseline!r},{p.counterfactual!r}\n")

    out.text("trajectory.csv", table, trajectories)
    out.json("trajectory.json", {"metadata": meta, "trajectories": trajectories})


def _write_brightspots(out: OutputDir, scores):
    out.text("brightspots.csv", fx.write_table, scores)
    out.json("brightspots.json", {"scores": scores, "residual": "Pearson (y - mu) / sqrt(mu)"})


def run_command(command: str, cfg: RunConfig) -> Path:
    """Run one command, writing its outputs and ``manifest.json`` into ``cfg.out``."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    cfg.validate(command)
    out = OutputDir(cfg.out)
    if command == "synth":
        with stage("synth"):
            try:
                synth_cfg = SyntheticConfig(**cfg.synthetic)
            except TypeError as e:
                raise ConfigError(f"bad synthetic config: {e}") from None
            ds = generate_synthetic_panel(synth_cfg, cfg.seed)
            paths = write_synthetic(ds, out.path)
            out.files += [p.name for p in paths.values()]
        write_manifest(out, command, cfg)
        return out.path

    ing = run_ingest(cfg)
    if command in ("ingest", "pipeline"):
        _write_ingest(out, ing)
    if command != "ingest":
        clu = run_cluster(cfg, ing)
        if command in ("cluster", "pipeline"):
            _write_cluster(out, clu)
    if command in ("fit", "effects", "simulate", "brightspots", "pipeline"):
        fs = run_fit(cfg, ing, clu)
        if command in ("fit", "pipeline"):
            _write_fit(out, fs)
        if command in ("effects", "pipeline"):
            _write_effects(out, *run_effects(cfg, fs))
        if command in ("simulate", "pipeline"):
            _write_simulate(out, *run_simulate(cfg, fs))
        if command in ("brightspots", "pipeline"):
            _write_brightspots(out, run_brightspots(cfg, fs))
    write_manifest(out, command, cfg)
    return out.path
