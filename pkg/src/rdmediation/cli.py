"""Command-line front end: ``simulate``, ``analyze``, ``lrt`` and ``density-grid``.

Settings come from an optional YAML file and are overridden by flags.  The
file is a flat mapping of the keys below; a section named after the command
(``simulate:``, ``analyze:``, ``lrt:``, ``density_grid:``) overrides the top
level for that command only.  ``seed`` is mandatory.

Exit status is 0 on success, 1 on a runtime failure (bad data, a fit that
fails) and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy
import yaml

from . import __version__
from .aft import (
    AftError,
    AftMcmc,
    AftPrior,
    bootstrap_aft,
    disparity_draws,
    fit_aft_bayes,
    fit_aft_mle,
    lrt_compare,
)
from .core import (
    DatasetError,
    DesignMatrixSpec,
    Schema,
    SubjectRecord,
    enumerate_strata,
    load_dataset,
    pooled_mediator_mean,
)
from .lddp import LddpError, McmcConfig, default_grid, eval_density, fit_lddp, lddp_design, write_density_csv
from .mediators import (
    BMI_CUTPOINTS,
    SeparationError,
    bcl_outcome_spec,
    fit_bcl,
    fit_linear_mediator,
    mediator_design,
    rd_bcl,
    rd_linear_draws,
)
from .rd import RdResult, assemble_result, rd_conditional, stratum_weights, write_results_csv
from .sim import (
    METHODS,
    REGIMES,
    SCENARIO_ALIASES,
    StudyConfig,
    _seed,
    aggregate,
    config_dict,
    default_jobs,
    make_scenario,
    run_replications,
    write_metrics_csv,
    write_replications_csv,
)

logger = logging.getLogger("rdmediation")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Resolved settings of one command."""

    command: str
    seed: int
    jobs: int = 1
    # simulate
    scenarios: tuple[str, ...] = ("RightTailed", "Bimodal", "Trinomial")
    regimes: tuple[str, ...] = ("cancors", "doubled")
    methods: tuple[str, ...] = METHODS
    replications: int = 100
    n_per_group: int = 750
    replications_output: str | None = None
    # data commands
    data: str | None = None
    factors: dict | None = None
    time_unit: str = "days"
    degree: int = 1
    interactions: tuple[str, ...] = ()
    weights: str = "comparison"
    bootstrap: int = 1000
    grid_points: int = 200
    rd_draws: int = 1000
    all_draws: bool = False
    # MCMC; None takes the command's default (desk scale for simulate)
    lddp_H: int = 30
    lddp_iterations: int | None = None
    lddp_burn_in: int | None = None
    lddp_thin: int = 4
    aft_iterations: int | None = None
    aft_burn_in: int | None = None
    output: str = "out"

    @property
    def schema(self) -> Schema:
        return Schema.from_dict(self.factors or {}, self.time_unit)

    @property
    def lddp_mcmc(self) -> McmcConfig:
        return McmcConfig(self.lddp_H, self.lddp_iterations, self.lddp_burn_in, self.lddp_thin, _seed(self.seed, 1))

    def aft_mcmc(self, retained: int) -> AftMcmc:
        # outcome chain keeps exactly as many draws as the mediator chain so they pair one to one
        thin = max(1, (self.aft_iterations - self.aft_burn_in) // retained)
        return AftMcmc(self.aft_burn_in + thin * retained, self.aft_burn_in, thin, _seed(self.seed, 2))

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_CHAIN_DEFAULTS = {
    "simulate": dict(lddp_iterations=3000, lddp_burn_in=1000, aft_iterations=3000, aft_burn_in=1000),
    "data": dict(lddp_iterations=10_000, lddp_burn_in=2_000, aft_iterations=10_000, aft_burn_in=2_000),
}

_TUPLE_KEYS = {"scenarios", "regimes", "methods", "interactions"}
_KNOWN = {f.name for f in fields(RunConfig)} - {"command"}
_SECTIONS = {"simulate", "analyze", "lrt", "density_grid"}


def _split(v) -> tuple[str, ...]:
    if isinstance(v, str):
        v = v.split(",")
    return tuple(str(x).strip() for x in v if str(x).strip())


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def resolve_config(command: str, file_cfg: dict, overrides: dict) -> RunConfig:
    """Merge top-level keys, the command's section and command-line overrides, then validate."""
    section = command.replace("-", "_")
    merged = {k: v for k, v in file_cfg.items() if k not in _SECTIONS}
    sec = file_cfg.get(section) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    merged.update(sec)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(merged) - _KNOWN)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    if merged.get("seed") is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    for k in _TUPLE_KEYS & set(merged):
        merged[k] = _split(merged[k])
    if "jobs" not in merged:
        merged["jobs"] = default_jobs()
    for k, v in _CHAIN_DEFAULTS["simulate" if command == "simulate" else "data"].items():
        merged.setdefault(k, v)
    try:
        cfg = RunConfig(command=command, **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    if cfg.command == "simulate":
        for s in cfg.scenarios:
            if s.lower() not in SCENARIO_ALIASES:
                raise ConfigError(f"unknown scenario {s!r}; choose from {sorted(set(SCENARIO_ALIASES.values()))}")
        for r in cfg.regimes:
            if r not in REGIMES:
                raise ConfigError(f"unknown theta regime {r!r}; choose from {list(REGIMES)}")
        if cfg.replications < 1:
            raise ConfigError("replications must be at least 1")
        return
    if cfg.data is None:
        raise ConfigError(f"{cfg.command} needs a dataset (config key 'data' or --data)")
    if not Path(cfg.data).exists():
        raise ConfigError(f"dataset not found: {cfg.data}")
    if cfg.factors is not None and not isinstance(cfg.factors, dict):
        raise ConfigError("factors must map factor names to lists of levels")
    try:
        schema = cfg.schema
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    parse_interactions(cfg.interactions, schema)
    if cfg.degree < 1:
        raise ConfigError("degree must be at least 1")
    if cfg.weights not in ("comparison", "reference", "pooled"):
        raise ConfigError(f"unknown weighting population {cfg.weights!r}")
    try:
        cfg.lddp_mcmc
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_interactions(tokens: Sequence[str], schema: Schema) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """``race:<factor>`` adds group x factor terms, ``bmi:<factor>`` mediator x factor terms."""
    group_cov, med_cov = [], []
    for tok in tokens:
        left, _, right = tok.partition(":")
        left = left.strip().lower()
        right = right.strip()
        if right not in schema.names:
            raise ConfigError(f"interaction {tok!r}: {right!r} is not a declared factor")
        if left in ("race", "group"):
            group_cov.append(right)
        elif left in ("bmi", "mediator"):
            med_cov.append(right)
        else:
            raise ConfigError(f"interaction {tok!r}: left side must be race/group or bmi/mediator")
    return tuple(dict.fromkeys(group_cov)), tuple(dict.fromkeys(med_cov))


# ---------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_manifest(path: Path, cfg: RunConfig, outputs: Sequence[Path], extra: dict | None = None) -> None:
    """Everything needed to rerun: resolved config, its hash, seed, versions and output digests."""
    conf = cfg.as_dict()
    conf.pop("jobs")  # parallelism does not change results
    man = {
        "command": cfg.command,
        "config": conf,
        "config_hash": config_hash(conf),
        "seed": cfg.seed,
        "versions": {
            "rdmediation": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if extra:
        man.update(extra)
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# analysis


@dataclass
class Analysis:
    results: list[RdResult]
    densities: list
    warnings: list[str]


def _outcome_spec(cfg: RunConfig, schema, center, gc, mc) -> DesignMatrixSpec:
    return DesignMatrixSpec(
        schema=schema, degree=cfg.degree, center=center, group_mediator=True,
        group_covariate=gc, mediator_covariate=mc,
    )


def run_analysis(records: Sequence[SubjectRecord], cfg: RunConfig) -> Analysis:
    """Disparity, RD and percent reduction per stratum and marginally, for each selected method."""
    schema = cfg.schema
    gc, mc = parse_interactions(cfg.interactions, schema)
    strata = enumerate_strata(schema)
    white = [r for r in records if r.group == 0]
    if not white or len(white) == len(records):
        raise DatasetError("both groups must be present")
    present = {r.covariates for r in white}
    warnings = []
    avail = [s for s in strata if s.levels in present]
    for s in strata:
        if s.levels not in present:
            msg = f"stratum {s.label} has no reference-group subjects; its RD is unavailable"
            logger.warning(msg)
            warnings.append(msg)
    weights = stratum_weights(records, strata, cfg.weights)
    center = pooled_mediator_mean(records)
    disp_spec = DesignMatrixSpec(schema=schema, group_covariate=gc)
    results, densities = [], []

    if "Density" in cfg.methods:
        lfit = fit_lddp(white, lddp_design(white, schema), mcmc=cfg.lddp_mcmc)
        T = lfit.n_draws
        spec = _outcome_spec(cfg, schema, center, gc, mc)
        aft = fit_aft_bayes(records, spec, AftPrior(), cfg.aft_mcmc(T))
        dfit = fit_aft_bayes(records, disp_spec, AftPrior(), cfg.aft_mcmc(T))
        grid = default_grid([r.mediator for r in records], cfg.grid_points)
        per, disp = {}, {}
        for s in avail:
            dens = eval_density(lfit, s, grid)
            densities.append(dens)
            per[s.levels] = rd_conditional(dens, aft.coef_draws, spec, s.levels, cfg.rd_draws,
                                           seed=_seed(cfg.seed, 3, s.index))
            disp[s.levels] = disparity_draws(dfit, s.levels)
        results.append(assemble_result("Density", per, strata, weights, disp, "credible"))

    boot = {}

    def boot_fit(name, spec, key):
        if name not in boot:
            boot[name] = bootstrap_aft(records, spec, cfg.bootstrap, _seed(cfg.seed, key), cfg.jobs)
        return boot[name]

    if {"Linear", "BCL", "Traditional"} & set(cfg.methods):
        dboot = boot_fit("disparity", disp_spec, 4)
        disp = {s.levels: disparity_draws(dboot, s.levels) for s in avail}

    if "Linear" in cfg.methods:
        lin = fit_linear_mediator(white, mediator_design(schema), cfg.bootstrap, _seed(cfg.seed, 5))
        aft = boot_fit("linear", _outcome_spec(cfg, schema, center, gc, mc), 6)
        per = {s.levels: rd_linear_draws(lin, aft, s.levels, cfg.rd_draws, _seed(cfg.seed, 7, s.index))
               for s in avail}
        results.append(assemble_result("Linear", per, strata, weights, disp, "bootstrap-percentile"))

    if "BCL" in cfg.methods:
        bcl = fit_bcl(white, mediator_design(schema), BMI_CUTPOINTS, cfg.bootstrap, _seed(cfg.seed, 8))
        spec = bcl_outcome_spec(schema, BMI_CUTPOINTS, True, gc, mc)
        aft = boot_fit("bcl", spec, 9)
        B = min(len(bcl.coef_draws), aft.n_draws)
        per = {s.levels: np.atleast_1d(rd_bcl(bcl, aft.coef_draws[:B], spec, s.levels, bcl.coef_draws[:B]))
               for s in avail}
        results.append(assemble_result("BCL", per, strata, weights,
                                       {k: v[:B] for k, v in disp.items()}, "bootstrap-percentile"))

    if "Traditional" in cfg.methods:
        spec = DesignMatrixSpec(schema=schema, degree=1, center=center, group_covariate=gc)
        aft = boot_fit("traditional", spec, 10)
        per = {s.levels: disparity_draws(aft, s.levels) for s in avail}
        results.append(assemble_result("Traditional", per, strata, weights, disp, "bootstrap-percentile"))

    return Analysis(results, densities, warnings)


def run_lrt(records: Sequence[SubjectRecord], cfg: RunConfig) -> list[tuple[str, float, int, float]]:
    """Drop each candidate interaction block from the full model in turn (one backward-selection step)."""
    schema = cfg.schema
    gc, mc = parse_interactions(cfg.interactions, schema)
    center = pooled_mediator_mean(records)
    full_spec = _outcome_spec(cfg, schema, center, gc, mc)
    full = fit_aft_mle(records, full_spec)
    rows = [("none", *lrt_compare(full, full))]
    blocks = [(f"race:{f}", "group_covariate", f) for f in gc] + [(f"bmi:{f}", "mediator_covariate", f) for f in mc]
    for label, attr, f in blocks:
        kept = tuple(x for x in getattr(full_spec, attr) if x != f)
        nested = fit_aft_mle(records, full_spec.with_(**{attr: kept}))
        rows.append((label, *lrt_compare(full, nested)))
    return rows


# ---------------------------------------------------------------------------
# commands


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    study = StudyConfig(
        scenarios=tuple(make_scenario(s).name for s in cfg.scenarios), regimes=cfg.regimes, methods=cfg.methods,
        replications=cfg.replications, root_seed=cfg.seed, n_per_group=cfg.n_per_group,
        lddp_H=cfg.lddp_H, lddp_iterations=cfg.lddp_iterations, lddp_burn_in=cfg.lddp_burn_in,
        lddp_thin=cfg.lddp_thin, aft_iterations=cfg.aft_iterations, aft_burn_in=cfg.aft_burn_in,
        rd_draws=cfg.rd_draws, linear_draws=cfg.rd_draws, grid_points=cfg.grid_points,
    )
    results, plan = run_replications(study, cfg.jobs)
    rows = aggregate(study, results)
    out = Path(cfg.output)
    if out.suffix.lower() != ".csv":
        out = _outdir(cfg) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    outputs = [out]
    if cfg.replications_output:
        rp = Path(cfg.replications_output)
        write_replications_csv(results, rp)
        outputs.append(rp)
    censoring = {
        f"{s}/{r}": {"shape": p.shape, "scale": p.scale, "pilot_censored": p.achieved,
                     "pilot_censored_after_truncation": p.observed}
        for (s, r), p in plan.items()
    }
    write_manifest(out.with_suffix(".manifest.json"), cfg, outputs,
                   {"study": config_dict(study), "censoring": censoring})
    failed = sum(r.n_failed for r in rows)
    if failed:
        logger.warning("%d method-replication fits failed and were excluded (see n_failed)", failed)
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    records = load_dataset(cfg.data, cfg.schema)
    res = run_analysis(records, cfg)
    out = _outdir(cfg)
    paths = [out / "results.csv", out / "density_grid.csv"]
    write_results_csv(res.results, paths[0])
    write_density_csv(res.densities, paths[1], mean_only=not cfg.all_draws)
    write_manifest(out / "manifest.json", cfg, paths, {"warnings": res.warnings})
    return EXIT_OK


def cmd_lrt(cfg: RunConfig) -> int:
    records = load_dataset(cfg.data, cfg.schema)
    rows = run_lrt(records, cfg)
    out = _outdir(cfg)
    path = out / "lrt.csv"
    with path.open("w") as fh:
        fh.write("dropped_block,statistic,df,p_value\n")
        for label, stat, df, p in rows:
            fh.write(f"{label},{stat!r},{df},{p!r}\n")
    write_manifest(out / "manifest.json", cfg, [path])
    return EXIT_OK


def cmd_density_grid(cfg: RunConfig) -> int:
    records = load_dataset(cfg.data, cfg.schema)
    white = [r for r in records if r.group == 0]
    if len(white) < 2:
        raise DatasetError("need at least two reference-group subjects")
    fit = fit_lddp(white, lddp_design(white, cfg.schema), mcmc=cfg.lddp_mcmc)
    grid = default_grid([r.mediator for r in records], cfg.grid_points)
    present = {r.covariates for r in white}
    dens = [eval_density(fit, s, grid) for s in enumerate_strata(cfg.schema) if s.levels in present]
    out = _outdir(cfg)
    path = out / "density_grid.csv"
    write_density_csv(dens, path, mean_only=not cfg.all_draws)
    write_manifest(out / "manifest.json", cfg, [path])
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "lrt": cmd_lrt, "density-grid": cmd_density_grid}


# ---------------------------------------------------------------------------
# argument parsing


def _factor_arg(text: str) -> tuple[str, list[str]]:
    name, _, levels = text.partition("=")
    if not name or not levels:
        raise argparse.ArgumentTypeError(f"expected NAME=level1,level2,...; got {text!r}")
    return name.strip(), [x.strip() for x in levels.split(",")]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdmediation", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="worker processes (default: $RDMEDIATION_JOBS or 1)")
        p.add_argument("--output", "-o", help="output directory (simulate: .csv path or directory)")
        p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
        p.add_argument("--rd-draws", type=int, dest="rd_draws")
        p.add_argument("--grid-points", type=int, dest="grid_points")
        p.add_argument("--lddp-iterations", type=int, dest="lddp_iterations")
        p.add_argument("--lddp-burn-in", type=int, dest="lddp_burn_in")
        p.add_argument("--lddp-thin", type=int, dest="lddp_thin")
        p.add_argument("--lddp-H", type=int, dest="lddp_H")
        p.add_argument("--aft-iterations", type=int, dest="aft_iterations")
        p.add_argument("--aft-burn-in", type=int, dest="aft_burn_in")
        p.add_argument("-v", "--verbose", action="store_true")

    def data(p):
        p.add_argument("--data", help="subject CSV: time,event,group,mediator,<factors...>")
        p.add_argument("--factor", action="append", type=_factor_arg, dest="factor_list",
                       help="declare a covariate, NAME=level1,level2 (repeatable, in column order)")
        p.add_argument("--time-unit", dest="time_unit")
        p.add_argument("--degree", type=int, help="mediator polynomial degree in the outcome model")
        p.add_argument("--interactions", help="e.g. race:age,race:sex,bmi:age")

    p = sub.add_parser("simulate", help="run the simulation study and write a metrics table")
    common(p)
    p.add_argument("--scenario", dest="scenarios", help="comma-separated scenario names")
    p.add_argument("--theta", dest="regimes", help="comma-separated theta regimes: " + ",".join(REGIMES))
    p.add_argument("--reps", type=int, dest="replications")
    p.add_argument("--n-per-group", type=int, dest="n_per_group")
    p.add_argument("--replications-output", dest="replications_output")

    p = sub.add_parser("analyze", help="disparity and residual disparity on a dataset")
    common(p)
    data(p)
    p.add_argument("--weights", choices=("comparison", "reference", "pooled"))
    p.add_argument("--bootstrap", type=int, help="bootstrap replicates for the frequentist methods")
    p.add_argument("--all-draws", action="store_true", default=None, dest="all_draws")

    p = sub.add_parser("lrt", help="likelihood-ratio tests for interaction blocks")
    common(p)
    data(p)

    p = sub.add_parser("density-grid", help="reference-group mediator density per stratum on a grid")
    common(p)
    data(p)
    p.add_argument("--all-draws", action="store_true", default=None, dest="all_draws")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    ns = vars(args).copy()
    command = ns.pop("command")
    config_path = ns.pop("config")
    ns.pop("verbose")
    factor_list = ns.pop("factor_list", None)
    if factor_list:
        ns["factors"] = dict(factor_list)
    try:
        cfg = resolve_config(command, load_config(config_path), ns)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[command](cfg)
    except (DatasetError, AftError, LddpError, SeparationError, FileNotFoundError,
            np.linalg.LinAlgError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"error: {command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
