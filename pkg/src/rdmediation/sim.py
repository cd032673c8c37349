"""Operating-characteristic study of the residual disparity estimators.

White (reference, group 0) mediators follow a normal or normal mixture with
mean 27; Black (comparison, group 1) mediators are N(29, 3.5^2).  Survival is
``log T = theta0 + theta1 R + theta2 M + theta3 R M + 0.82 eps`` on the raw
mediator.  Independent Weibull censoring times are calibrated so that the
target fraction of ``min(T_s, T_c)`` is censored; observed times are then
truncated administratively at 1826.25 days, which censors further.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, stats

from .aft import AftMcmc, AftPrior, fit_aft_bayes_arrays, fit_aft_mle_arrays
from .core import DesignMatrixSpec, Schema, SubjectRecord
from .lddp import McmcConfig, default_grid, eval_density, fit_lddp_arrays
from .mediators import (
    BMI_CUTPOINTS,
    BclFit,
    LinearMediatorFit,
    _bcl_newton,
    bcl_outcome_spec,
    categorize_bmi,
    difference_spec,
    mediator_design,
    rd_bcl,
    rd_linear_counterfactual,
)
from .rd import rd_conditional

logger = logging.getLogger(__name__)

METHODS = ("Density", "Linear", "BCL", "Traditional")
TRUNCATION_DAYS = 1826.25


@dataclass(frozen=True)
class NormalMixture:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]

    def __post_init__(self):
        if not math.isclose(sum(self.weights), 1.0, abs_tol=1e-12):
            raise ValueError("mixture weights must sum to 1")

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal(n)
        return np.asarray(self.means)[k] + np.asarray(self.sds)[k] * z

    def pdf(self, m):
        return sum(w * stats.norm.pdf(m, mu, s) for w, mu, s in zip(self.weights, self.means, self.sds))

    def cdf(self, m):
        return sum(w * stats.norm.cdf(m, mu, s) for w, mu, s in zip(self.weights, self.means, self.sds))

    def mgf(self, t: float) -> float:
        return float(sum(w * math.exp(t * mu + 0.5 * (t * s) ** 2) for w, mu, s in zip(self.weights, self.means, self.sds)))


WHITE_LAWS = {
    "LocationShift": NormalMixture((1.0,), (27.0,), (3.5,)),
    "RightTailed": NormalMixture((0.75, 0.25), (25.0, 33.0), (2.5, 4.5)),
    "Bimodal": NormalMixture((0.5, 0.5), (22.5, 31.5), (2.5, 3.0)),
    "Trinomial": NormalMixture((0.4, 0.35, 0.25), (22.0, 28.0, 33.6), (1.5, 1.5, 2.0)),
}
BLACK_LAW = NormalMixture((1.0,), (29.0,), (3.5,))

# theta = (theta0, theta1, theta2, theta3); "-noint" regimes drop the R x M effect
REGIMES = {
    "cancors": (7.56, -0.88, 0.029, 0.022),
    "cancors-noint": (7.56, -0.88, 0.029, 0.0),
    "doubled": (7.56, -1.76, 0.058, 0.044),
    "doubled-noint": (7.56, -1.76, 0.058, 0.0),
}

SCENARIO_ALIASES = {name.lower(): name for name in WHITE_LAWS}
SCENARIO_ALIASES.update({"location": "LocationShift", "rt": "RightTailed", "bi": "Bimodal", "tri": "Trinomial"})


@dataclass(frozen=True)
class Scenario:
    name: str
    white: NormalMixture
    black: NormalMixture = BLACK_LAW
    theta: tuple[float, float, float, float] = REGIMES["cancors"]
    regime: str = "cancors"
    nu: float = 0.82
    n_per_group: int = 750
    truncation: float = TRUNCATION_DAYS
    target_censoring: float = 0.65

    def __post_init__(self):
        if abs(self.white.mean - 27.0) > 1e-9 and self.name in WHITE_LAWS:
            raise ValueError(f"{self.name}: reference-group mediator mean must be 27")


def make_scenario(name: str, regime: str = "cancors", **kw) -> Scenario:
    key = SCENARIO_ALIASES.get(name.lower(), name)
    if key not in WHITE_LAWS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(WHITE_LAWS)}")
    if regime not in REGIMES:
        raise KeyError(f"unknown theta regime {regime!r}; choose from {sorted(REGIMES)}")
    return Scenario(key, WHITE_LAWS[key], theta=REGIMES[regime], regime=regime, **kw)


# ---------------------------------------------------------------------------
# data generation


@dataclass(frozen=True)
class CensoringParams:
    """Weibull censoring ``T_c = scale * E**(1/shape)`` with ``E`` standard exponential.

    ``achieved`` is the pilot fraction with ``T_c < T_s``; ``observed`` adds
    administrative truncation.
    """

    shape: float
    scale: float  # math.inf: no random censoring
    achieved: float
    observed: float = float("nan")


@dataclass
class SimData:
    time: np.ndarray
    event: np.ndarray
    group: np.ndarray
    mediator: np.ndarray

    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(float(t), bool(d), int(g), float(m))
            for t, d, g, m in zip(self.time, self.event, self.group, self.mediator)
        ]

    @property
    def censored_fraction(self) -> float:
        return float(1.0 - self.event.mean())


def _draw(scenario: Scenario, n_per_group: int, rng: np.random.Generator):
    # mediators first, so the reference-group sample is shared across theta regimes
    mw = scenario.white.sample(n_per_group, rng)
    mb = scenario.black.sample(n_per_group, rng)
    eps = np.log(-np.log(rng.random(2 * n_per_group)))
    expo = rng.standard_exponential(2 * n_per_group)
    m = np.concatenate([mw, mb])
    r = np.concatenate([np.zeros(n_per_group), np.ones(n_per_group)])
    th = scenario.theta
    logt = th[0] + th[1] * r + th[2] * m + th[3] * r * m + scenario.nu * eps
    return r, m, np.exp(logt), expo


def _censor(ts, expo, cens: CensoringParams | None, truncation: float = math.inf):
    if cens is None or math.isinf(cens.scale):
        tc = np.full_like(ts, math.inf)
    else:
        tc = cens.scale * expo ** (1.0 / cens.shape)
    t = np.minimum(ts, tc)
    event = ts <= tc
    trunc = t > truncation
    return np.where(trunc, truncation, t), event & ~trunc


def generate_dataset(scenario: Scenario, seed, censoring: CensoringParams | None = None) -> SimData:
    """One simulated dataset; ``censoring=None`` leaves only administrative truncation."""
    rng = np.random.default_rng(seed)
    r, m, ts, expo = _draw(scenario, scenario.n_per_group, rng)
    t, event = _censor(ts, expo, censoring, scenario.truncation)
    return SimData(t, event, r.astype(int), m)


def censoring_fractions(scenario: Scenario, censoring: CensoringParams, seed) -> tuple[float, float]:
    """Fractions ``T_c < T_s`` and censored-after-truncation on one fresh dataset."""
    rng = np.random.default_rng(seed)
    _, _, ts, expo = _draw(scenario, scenario.n_per_group, rng)
    tc = censoring.scale * expo ** (1.0 / censoring.shape)
    _, event = _censor(ts, expo, censoring, scenario.truncation)
    return float(np.mean(tc < ts)), float(1.0 - event.mean())


class CalibrationError(RuntimeError):
    pass


def calibrate_censoring(
    scenario: Scenario, pilot: int = 100_000, seed: int = 20180101, shape: float = 1.0,
) -> CensoringParams:
    """Weibull censoring scale giving the target fraction of ``T_c < T_s`` on a pilot sample.

    Bisection on the log scale with common random numbers, so the pilot
    fraction is monotone in the scale.
    """
    target = scenario.target_censoring
    if not 0 < target < 1:
        raise CalibrationError(f"target censoring fraction {target} must lie strictly in (0, 1)")
    if not shape > 0:
        raise CalibrationError("censoring shape must be positive")
    rng = np.random.default_rng(seed)
    _, _, ts, expo = _draw(scenario, pilot // 2, rng)
    e = expo ** (1.0 / shape)

    def frac(log_scale):
        return float(np.mean(math.exp(log_scale) * e < ts))

    mid = math.log(np.median(ts))
    lo, hi = mid - 30.0, mid + 30.0
    if not frac(hi) < target < frac(lo):
        raise CalibrationError(f"censoring target {target:.2f} unreachable on a pilot of {pilot}")
    for _ in range(200):
        c = 0.5 * (lo + hi)
        f = frac(c)
        if abs(f - target) < 1e-4 or hi - lo < 1e-12:
            break
        if f > target:
            lo = c
        else:
            hi = c
    out = CensoringParams(shape, math.exp(c), f)
    _, ev = _censor(ts, expo, out, scenario.truncation)
    return replace(out, observed=float(1.0 - ev.mean()))


# ---------------------------------------------------------------------------
# truth


def true_rd(scenario: Scenario) -> float:
    """e^{theta1} E[e^{(theta2+theta3) M}] / E[e^{theta2 M}] under the reference law (closed form)."""
    _, t1, t2, t3 = scenario.theta
    return math.exp(t1) * scenario.white.mgf(t2 + t3) / scenario.white.mgf(t2)


def true_rd_quadrature(scenario: Scenario) -> float:
    """Same quantity by adaptive quadrature of the two integrals."""
    _, t1, t2, t3 = scenario.theta
    w = scenario.white
    lo = min(mu - 12 * s for mu, s in zip(w.means, w.sds))
    hi = max(mu + 12 * s for mu, s in zip(w.means, w.sds))
    pts = list(w.means)
    opts = dict(points=pts, epsabs=0.0, epsrel=1e-13, limit=500)
    num = integrate.quad(lambda m: math.exp((t2 + t3) * m) * w.pdf(m), lo, hi, **opts)[0]
    den = integrate.quad(lambda m: math.exp(t2 * m) * w.pdf(m), lo, hi, **opts)[0]
    return math.exp(t1) * num / den


# ---------------------------------------------------------------------------
# estimators on one dataset


@dataclass(frozen=True)
class StudyConfig:
    """Settings of a study run; everything that changes an estimate lives here."""

    scenarios: tuple[str, ...] = tuple(WHITE_LAWS)
    regimes: tuple[str, ...] = ("cancors", "doubled")
    methods: tuple[str, ...] = METHODS
    replications: int = 100
    root_seed: int = 0
    n_per_group: int = 750
    lddp_H: int = 30
    lddp_iterations: int = 3000
    lddp_burn_in: int = 1000
    lddp_thin: int = 4
    aft_iterations: int = 3000
    aft_burn_in: int = 1000
    rd_draws: int = 1000
    linear_draws: int = 1000
    grid_points: int = 200
    pilot: int = 100_000

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for s in self.scenarios:
            make_scenario(s)
        for r in self.regimes:
            if r not in REGIMES:
                raise ValueError(f"unknown theta regime {r!r}")

    @property
    def lddp_mcmc(self) -> McmcConfig:
        return McmcConfig(self.lddp_H, self.lddp_iterations, self.lddp_burn_in, self.lddp_thin)

    @property
    def n_retained(self) -> int:
        return self.lddp_mcmc.n_retained

    @property
    def aft_mcmc(self) -> AftMcmc:
        # thinning chosen so the outcome chain retains exactly as many draws as the mediator chain
        kept = self.aft_iterations - self.aft_burn_in
        thin = max(1, kept // self.n_retained)
        return AftMcmc(self.aft_burn_in + thin * self.n_retained, self.aft_burn_in, thin)


def _seed(root: int, *key: int) -> int:
    return int(np.random.SeedSequence(root, spawn_key=tuple(key)).generate_state(1, np.uint64)[0] >> 1)


def scenario_id(name: str) -> int:
    return list(WHITE_LAWS).index(make_scenario(name).name)


def regime_id(name: str) -> int:
    return list(REGIMES).index(name)


def _outcome_spec(center: float) -> DesignMatrixSpec:
    return DesignMatrixSpec(degree=1, center=center, group_mediator=True)


def estimate_density(data: SimData, cfg: StudyConfig, lddp_state, seed: int) -> float:
    fit, grid = lddp_state
    dens = eval_density(fit, (), grid)
    spec = _outcome_spec(float(data.mediator.mean()))
    X = spec.matrix(data.group, data.mediator, [()] * len(data.group))
    mc = cfg.aft_mcmc
    aft = fit_aft_bayes_arrays(X, np.log(data.time), data.event, spec, AftPrior(),
                               AftMcmc(mc.iterations, mc.burn_in, mc.thin, seed))
    draws = rd_conditional(dens, aft.coef_draws, spec, (), cfg.rd_draws, seed=seed + 1)
    return float(draws.mean())


def estimate_linear(data: SimData, cfg: StudyConfig, seed: int) -> float:
    white = data.mediator[data.group == 0]
    lin = LinearMediatorFit(mediator_design(Schema()), np.array([white.mean()]), float(white.std(ddof=1)))
    spec = _outcome_spec(float(data.mediator.mean()))
    X = spec.matrix(data.group, data.mediator, [()] * len(data.group))
    aft = fit_aft_mle_arrays(X, np.log(data.time), data.event, spec)
    return rd_linear_counterfactual(lin, aft, (), cfg.linear_draws, seed=seed)


def estimate_bcl(data: SimData, cfg: StudyConfig) -> float:
    white = data.mediator[data.group == 0]
    cats = categorize_bmi(white)
    K1 = len(BMI_CUTPOINTS) + 1
    if np.any(np.bincount(cats, minlength=K1) == 0):
        raise ValueError("a BMI category is empty in the reference group")
    B, _ = _bcl_newton(np.ones((len(white), 1)), np.eye(K1)[cats])
    bcl = BclFit(mediator_design(Schema()), B)
    spec = bcl_outcome_spec(Schema())
    X = spec.matrix(data.group, data.mediator, [()] * len(data.group))
    aft = fit_aft_mle_arrays(X, np.log(data.time), data.event, spec)
    return float(rd_bcl(bcl, aft.coef, spec, ()))


def estimate_traditional(data: SimData) -> float:
    spec = difference_spec(Schema())
    X = spec.matrix(data.group, data.mediator, [()] * len(data.group))
    aft = fit_aft_mle_arrays(X, np.log(data.time), data.event, spec)
    return float(math.exp(aft.coef[1]))


# ---------------------------------------------------------------------------
# replication loop


@dataclass
class ReplicationResult:
    scenario: str
    regime: str
    replication: int
    estimates: dict[str, float]
    errors: dict[str, str]
    censored_fraction: float


def run_unit(cfg: StudyConfig, scenario_name: str, rep: int, censoring: dict[str, CensoringParams]) -> list[ReplicationResult]:
    """All regimes of one (scenario, replication): the reference-group sample and its mixture fit are shared."""
    sid = scenario_id(scenario_name)
    data_seed = _seed(cfg.root_seed, sid, rep, 0)
    lddp_state = None
    lddp_error = None
    out = []
    for regime in cfg.regimes:
        sc = make_scenario(scenario_name, regime, n_per_group=cfg.n_per_group)
        data = generate_dataset(sc, data_seed, censoring[regime])
        rid = regime_id(regime)
        est, err = {}, {}
        if "Density" in cfg.methods and lddp_state is None and lddp_error is None:
            white = data.mediator[data.group == 0]
            try:
                mc = replace(cfg.lddp_mcmc, seed=_seed(cfg.root_seed, sid, rep, 1))
                fit = fit_lddp_arrays(np.ones((white.size, 1)), white, DesignMatrixSpec(group=False), None, mc)
                grid = default_grid(data.mediator, cfg.grid_points)
                lddp_state = (fit, grid)
            except Exception as exc:  # noqa: BLE001 - recorded per replication
                lddp_error = f"{type(exc).__name__}: {exc}"
        for method in cfg.methods:
            seed = _seed(cfg.root_seed, sid, rep, 2 + rid, METHODS.index(method))
            try:
                if method == "Density":
                    if lddp_error:
                        raise RuntimeError(lddp_error)
                    est[method] = estimate_density(data, cfg, lddp_state, seed)
                elif method == "Linear":
                    est[method] = estimate_linear(data, cfg, seed)
                elif method == "BCL":
                    est[method] = estimate_bcl(data, cfg)
                else:
                    est[method] = estimate_traditional(data)
                if not (math.isfinite(est[method]) and est[method] > 0):
                    raise FloatingPointError(f"non-finite estimate {est[method]}")
            except Exception as exc:  # noqa: BLE001 - recorded per replication
                est.pop(method, None)
                err[method] = f"{type(exc).__name__}: {exc}"
                logger.warning("%s/%s rep %d %s failed: %s", scenario_name, regime, rep, method, err[method])
        out.append(ReplicationResult(make_scenario(scenario_name).name, regime, rep, est, err, data.censored_fraction))
    return out


@dataclass(frozen=True)
class MetricsRow:
    method: str
    scenario: str
    theta_regime: str
    rmse: float
    bias: float
    sd: float
    n_ok: int
    n_failed: int
    truth: float = float("nan")


def summarize(estimates: Sequence[float], truth: float) -> tuple[float, float, float]:
    """rMSE, bias and SD (denominator n) so that rMSE^2 = bias^2 + SD^2."""
    e = np.asarray(estimates, dtype=float)
    if e.size == 0:
        return float("nan"), float("nan"), float("nan")
    bias = float(e.mean() - truth)
    sd = float(e.std(ddof=0))
    rmse = float(np.sqrt(np.mean((e - truth) ** 2)))
    return rmse, bias, sd


def censoring_plan(cfg: StudyConfig) -> dict[tuple[str, str], CensoringParams]:
    plan = {}
    for s in cfg.scenarios:
        for r in cfg.regimes:
            sc = make_scenario(s, r, n_per_group=cfg.n_per_group)
            plan[(sc.name, r)] = calibrate_censoring(
                sc, pilot=cfg.pilot, seed=_seed(cfg.root_seed, scenario_id(s), 10**6, regime_id(r)),
            )
    return plan


def _unit_job(args):
    cfg, name, rep, cens = args
    return run_unit(cfg, name, rep, cens)


def run_replications(cfg: StudyConfig, n_jobs: int = 1, progress=None) -> tuple[list[ReplicationResult], dict]:
    plan = censoring_plan(cfg)
    jobs = []
    for s in cfg.scenarios:
        name = make_scenario(s).name
        cens = {r: plan[(name, r)] for r in cfg.regimes}
        for rep in range(cfg.replications):
            jobs.append((cfg, name, rep, cens))
    results: list[ReplicationResult] = []
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            for i, res in enumerate(ex.map(_unit_job, jobs)):
                results.extend(res)
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, j in enumerate(jobs):
            results.extend(_unit_job(j))
            if progress:
                progress(i + 1, len(jobs))
    results.sort(key=lambda r: (scenario_id(r.scenario), regime_id(r.regime), r.replication))
    return results, plan


def aggregate(cfg: StudyConfig, results: Sequence[ReplicationResult]) -> list[MetricsRow]:
    rows = []
    for s in cfg.scenarios:
        name = make_scenario(s).name
        for r in cfg.regimes:
            truth = true_rd(make_scenario(name, r))
            sub = [x for x in results if x.scenario == name and x.regime == r]
            for m in cfg.methods:
                ests = [x.estimates[m] for x in sub if m in x.estimates]
                n_failed = sum(m in x.errors for x in sub)
                if n_failed:
                    logger.warning("%s/%s %s: %d replication(s) failed and were excluded", name, r, m, n_failed)
                rmse, bias, sd = summarize(ests, truth)
                rows.append(MetricsRow(m, name, r, rmse, bias, sd, len(ests), n_failed, truth))
    return rows


def run_study(cfg: StudyConfig, n_jobs: int = 1, progress=None) -> list[MetricsRow]:
    results, _ = run_replications(cfg, n_jobs, progress)
    return aggregate(cfg, results)


def default_jobs() -> int:
    return int(os.environ.get("RDMEDIATION_JOBS", "1"))


# ---------------------------------------------------------------------------
# output

METRICS_HEADER = ["method", "scenario", "theta_regime", "rmse", "bias", "sd", "n_ok", "n_failed"]


def write_metrics_csv(rows: Iterable[MetricsRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.method, r.scenario, r.theta_regime, repr(r.rmse), repr(r.bias), repr(r.sd), r.n_ok, r.n_failed])


def write_replications_csv(results: Iterable[ReplicationResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "theta_regime", "replication", "method", "estimate", "error", "censored_fraction"])
        for r in results:
            for m in METHODS:
                if m in r.estimates:
                    w.writerow([r.scenario, r.regime, r.replication, m, repr(r.estimates[m]), "", repr(r.censored_fraction)])
                elif m in r.errors:
                    w.writerow([r.scenario, r.regime, r.replication, m, "", r.errors[m], repr(r.censored_fraction)])


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        return [
            MetricsRow(d["method"], d["scenario"], d["theta_regime"], float(d["rmse"]), float(d["bias"]),
                       float(d["sd"]), int(d["n_ok"]), int(d["n_failed"]))
            for d in csv.DictReader(fh)
        ]


def config_dict(cfg: StudyConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
