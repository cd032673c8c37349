"""Weibull accelerated failure time models for censored survival.

``log T = x' theta + nu * eps`` with ``eps`` standard minimum extreme value,
i.e. ``P(eps > e) = exp(-exp(e))``.  Then ``T`` is Weibull with shape
``1/nu`` and ``E[exp(nu * eps)] = Gamma(1 + nu)``.  All fitting is done on
``(theta, log nu)`` so every iterate has a valid scale.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .core import DesignMatrixSpec, IntervalSummary, SubjectRecord, design_matrix, records_to_arrays

logger = logging.getLogger(__name__)

# |coef| x (regressor range) beyond this on the log-time scale is treated as divergence
MONOTONE_LIMIT = 15.0  # |coef| * range, log-time units
MONOTONE_SE_LIMIT = 25.0  # standard error * range


class AftError(RuntimeError):
    """Fitting failure: no events, rank deficiency, or non-convergence."""


@dataclass
class AftFit:
    spec: DesignMatrixSpec
    coef: np.ndarray
    log_scale: float
    kind: str = "MLE"
    loglik: float = float("nan")
    converged: bool = True
    cov: np.ndarray | None = None
    coef_draws: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    scale_draws: np.ndarray = field(default_factory=lambda: np.zeros(0))
    acceptance: float = float("nan")
    n_iter: int = 0

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    @property
    def n_draws(self) -> int:
        return self.coef_draws.shape[0]

    @property
    def names(self) -> list[str]:
        return self.spec.column_names()

    def stderr(self) -> np.ndarray:
        if self.cov is None:
            raise ValueError("fit has no covariance estimate")
        return np.sqrt(np.diag(self.cov))

    def coefficient(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])


# ---------------------------------------------------------------------------
# likelihood


def weibull_loglik(params: np.ndarray, X: np.ndarray, logt: np.ndarray, event: np.ndarray, derivs: int = 2):
    """Log-likelihood of the Weibull AFT in ``params = (theta, log nu)``.

    Returns ``ll`` or ``(ll, grad)`` or ``(ll, grad, hess)`` for
    ``derivs`` 0, 1, 2.
    """
    theta, s = params[:-1], params[-1]
    nu = math.exp(s)
    z = (logt - X @ theta) / nu
    with np.errstate(over="ignore"):
        ez = np.exp(z)  # inf gives ll = -inf, rejected by the line search
    d = event.astype(float)
    ll = float(np.sum(d * (z - s - logt)) - np.sum(ez))
    if derivs == 0:
        return ll
    r = ez - d
    g_theta = X.T @ r / nu
    g_s = float(r @ z - d.sum())
    grad = np.append(g_theta, g_s)
    if derivs == 1:
        return ll, grad
    p = X.shape[1]
    H = np.empty((p + 1, p + 1))
    H[:p, :p] = -(X.T * ez) @ X / nu**2
    cross = -X.T @ (ez * z + r) / nu
    H[:p, p] = cross
    H[p, :p] = cross
    H[p, p] = -float(np.sum(ez * z**2 + r * z))
    return ll, grad, H


def _check_design(X: np.ndarray, event: np.ndarray) -> None:
    if X.shape[0] == 0 or not np.any(event):
        raise AftError("no events: the Weibull AFT likelihood has no maximum")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise AftError("design matrix is rank deficient (a column is constant or collinear)")


def _start(X, logt, event):
    theta, *_ = np.linalg.lstsq(X, logt, rcond=None)
    resid = logt - X @ theta
    s = math.log(max(resid.std(), 0.1))
    # shift intercept-like component so that roughly sum(exp(z)) = #events
    nu = math.exp(s)
    z = (logt - X @ theta) / nu
    c = nu * (math.log(np.exp(z).sum()) - math.log(max(event.sum(), 1)))
    return np.append(theta + np.linalg.lstsq(X, np.full(len(logt), c), rcond=None)[0], s)


def newton_mle(X, logt, event, x0=None, gtol=1e-6, max_iter=200):
    """Damped Newton with backtracking; returns ``(params, ll, grad, hess, converged, iters)``.

    Converged means gradient sup-norm below ``gtol``.  Close to the optimum
    the log-likelihood stops resolving ascent (rounding), so once the Newton
    decrement is tiny full steps are taken without the ascent check; if the
    gradient still cannot reach ``gtol`` a decrement below 1e-12 also counts.
    """
    params = _start(X, logt, event) if x0 is None else np.asarray(x0, dtype=float).copy()
    ll, g, H = weibull_loglik(params, X, logt, event)
    converged = False
    dec = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        if np.abs(g).max() < gtol:
            converged = True
            break
        try:
            step = np.linalg.solve(-H, g)
            dec = float(g @ step)
            if not np.all(np.isfinite(step)) or dec <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            # fall back to a scaled gradient step when the Hessian is not negative definite
            step = g / max(1.0, np.abs(g).max())
            dec = np.inf
        if dec < 1e-8:
            cand = params + step
            ll_new = weibull_loglik(cand, X, logt, event, derivs=0)
            t = 1.0 if np.isfinite(ll_new) else 0.0
        else:
            t = 1.0
            while t >= 1e-12:
                cand = params + t * step
                ll_new = weibull_loglik(cand, X, logt, event, derivs=0)
                if np.isfinite(ll_new) and ll_new >= ll + 1e-4 * t * (g @ step):
                    break
                t *= 0.5
        if t < 1e-12:
            break
        params = cand
        g_prev = np.abs(g).max()
        ll, g, H = weibull_loglik(params, X, logt, event)
        if dec < 1e-8 and np.abs(g).max() >= g_prev:
            # rounding floor reached
            break
    if not converged:
        converged = bool(np.abs(g).max() < gtol or dec < 1e-12)
    return params, ll, g, H, converged, it


def _check_divergence(X, coef, names, cov=None, limit=MONOTONE_LIMIT, se_limit=MONOTONE_SE_LIMIT):
    """Flag coefficients whose effect, or its standard error, over the observed range is implausibly large.

    This is the signature of a monotone likelihood, e.g. a category with no
    events in one group, where the MLE does not exist: Newton stops on a
    flat ridge at a large finite value with almost no curvature.
    """
    span = np.ptp(X, axis=0)
    effect = np.abs(coef) * span
    if cov is None:
        se_span = np.full_like(span, np.inf)
    else:
        with np.errstate(invalid="ignore"):
            se_span = np.sqrt(np.abs(np.diag(cov)[: len(coef)])) * span
    bad = [n for n, e, v, s in zip(names, effect, se_span, span) if s > 0 and (e > limit or v > se_limit)]
    if bad:
        raise AftError(f"monotone likelihood: estimates for {bad} diverge (no finite MLE)")


def _arrays(records: Sequence[SubjectRecord], spec: DesignMatrixSpec):
    t, d, _, _ = records_to_arrays(records)
    X = design_matrix(records, spec)
    return X, np.log(t), d


def fit_aft_mle_arrays(X, logt, event, spec: DesignMatrixSpec, gtol: float = 1e-6, max_iter: int = 200) -> AftFit:
    X = np.asarray(X, dtype=float)
    event = np.asarray(event, dtype=bool)
    _check_design(X, event)
    params, ll, g, H, ok, it = newton_mle(X, logt, event, gtol=gtol, max_iter=max_iter)
    if not ok:
        raise AftError(f"Newton iterations did not converge (|grad|max = {np.abs(g).max():.3g} after {it} steps)")
    names = spec.column_names() if spec is not None and spec.n_columns == X.shape[1] else [f"x{j}" for j in range(X.shape[1])]
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = None
    _check_divergence(X, params[:-1], names, cov)
    return AftFit(
        spec=spec, coef=params[:-1], log_scale=float(params[-1]), kind="MLE", loglik=ll,
        converged=True, cov=cov, n_iter=it,
    )


def fit_aft_mle(records: Sequence[SubjectRecord], spec: DesignMatrixSpec) -> AftFit:
    """Censored-data maximum likelihood; ``cov`` covers ``(theta, log nu)``."""
    X, logt, d = _arrays(records, spec)
    return fit_aft_mle_arrays(X, logt, d, spec)


# ---------------------------------------------------------------------------
# bootstrap


def _boot_one(args):
    X, logt, d, spec, seed, x0 = args
    rng = np.random.default_rng(seed)
    n = len(logt)
    idx = rng.integers(0, n, n)
    Xb, lb, db = X[idx], logt[idx], d[idx]
    try:
        _check_design(Xb, db)
        params, *_rest, ok, _ = newton_mle(Xb, lb, db, x0=x0)
    except (AftError, np.linalg.LinAlgError):
        return None
    return params if ok else None


def bootstrap_aft(
    records: Sequence[SubjectRecord], spec: DesignMatrixSpec, B: int = 1000, seed: int = 0, n_jobs: int = 1,
    fit: AftFit | None = None,
) -> AftFit:
    """Nonparametric bootstrap of subjects; failed resamples are redrawn from fresh substreams."""
    X, logt, d = _arrays(records, spec)
    if fit is None:
        fit = fit_aft_mle_arrays(X, logt, d, spec)
    x0 = np.append(fit.coef, fit.log_scale)
    root = np.random.SeedSequence(seed)
    draws: list[np.ndarray] = []
    attempt = 0
    while len(draws) < B:
        need = B - len(draws)
        children = root.spawn(need)
        jobs = [(X, logt, d, spec, c, x0) for c in children]
        if n_jobs > 1:
            with ProcessPoolExecutor(n_jobs) as ex:
                res = list(ex.map(_boot_one, jobs, chunksize=max(1, need // (4 * n_jobs))))
        else:
            res = [_boot_one(j) for j in jobs]
        draws.extend(r for r in res if r is not None)
        attempt += 1
        if attempt > 20:
            raise AftError("bootstrap resamples repeatedly failed to converge")
    arr = np.vstack(draws[:B])
    fit.coef_draws = arr[:, :-1]
    fit.scale_draws = np.exp(arr[:, -1])
    return fit


# ---------------------------------------------------------------------------
# Bayesian fit


@dataclass(frozen=True)
class AftPrior:
    """Independent normal priors: coefficients N(mean, coef_sd^2), log nu N(0, log_scale_sd^2)."""

    coef_sd: float | np.ndarray = 10.0
    coef_mean: float | np.ndarray = 0.0
    log_scale_mean: float = 0.0
    log_scale_sd: float = 2.0


@dataclass(frozen=True)
class AftMcmc:
    iterations: int = 10_000
    burn_in: int = 2_000
    thin: int = 4
    seed: int = 0

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def _log_prior(params, mean, sd, pinned):
    z = (params - mean) / sd
    return -0.5 * float(np.sum(z[~pinned] ** 2))


def fit_aft_bayes_arrays(X, logt, event, spec, prior: AftPrior = AftPrior(), mcmc: AftMcmc = AftMcmc()) -> AftFit:
    X = np.asarray(X, dtype=float)
    event = np.asarray(event, dtype=bool)
    _check_design(X, event)
    p = X.shape[1]
    mean = np.append(np.broadcast_to(np.asarray(prior.coef_mean, float), (p,)), prior.log_scale_mean)
    sd = np.append(np.broadcast_to(np.asarray(prior.coef_sd, float), (p,)), prior.log_scale_sd)
    pinned = sd == 0
    sd_safe = np.where(pinned, 1.0, sd)
    free = ~pinned

    # start at the (penalized) mode with the Laplace covariance as proposal
    params, _, _, H, _, _ = newton_mle(X, logt, event)
    params[pinned] = mean[pinned]
    prec = -H + np.diag(np.where(pinned, 0.0, 1.0 / sd_safe**2))
    Hf = prec[np.ix_(free, free)]
    try:
        cov_f = np.linalg.inv(Hf)
        np.linalg.cholesky(cov_f)
    except np.linalg.LinAlgError:
        cov_f = np.eye(free.sum()) * 1e-4
    d = int(free.sum())
    scale = 2.38**2 / max(d, 1)

    rng = np.random.default_rng(mcmc.seed)
    lp = weibull_loglik(params, X, logt, event, derivs=0) + _log_prior(params, mean, sd_safe, pinned)
    T = mcmc.n_retained
    out = np.empty((T, p + 1))
    chol = np.linalg.cholesky(scale * cov_f)
    accepted = 0
    acc_window = 0
    hist_sum = np.zeros(d)
    hist_outer = np.zeros((d, d))
    n_hist = 0
    k = 0
    for it in range(1, mcmc.iterations + 1):
        prop = params.copy()
        prop[free] += chol @ rng.standard_normal(d)
        lp_new = weibull_loglik(prop, X, logt, event, derivs=0) + _log_prior(prop, mean, sd_safe, pinned)
        if np.log(rng.random()) < lp_new - lp:
            params, lp = prop, lp_new
            if it > mcmc.burn_in:
                accepted += 1
            else:
                acc_window += 1
        if it <= mcmc.burn_in:
            f = params[free]
            hist_sum += f
            hist_outer += np.outer(f, f)
            n_hist += 1
            # adapt every 200 iterations during burn-in only
            if it % 200 == 0:
                rate = acc_window / 200
                acc_window = 0
                scale *= math.exp(rate - 0.234)
                if n_hist > 10 * d:
                    m = hist_sum / n_hist
                    emp = hist_outer / n_hist - np.outer(m, m)
                    c = 0.95 * emp + 0.05 * cov_f
                else:
                    c = cov_f
                try:
                    chol = np.linalg.cholesky(scale * ((c + c.T) / 2))
                except np.linalg.LinAlgError:
                    chol = np.linalg.cholesky(scale * cov_f)
        elif (it - mcmc.burn_in) % mcmc.thin == 0 and k < T:
            out[k] = params
            k += 1
    n_post = mcmc.iterations - mcmc.burn_in
    fit = AftFit(
        spec=spec, coef=out[:, :-1].mean(axis=0), log_scale=float(np.log(np.exp(out[:, -1]).mean())),
        kind="Bayesian", loglik=weibull_loglik(np.append(out[:, :-1].mean(axis=0), out[:, -1].mean()), X, logt, event, 0),
        converged=True, coef_draws=out[:, :-1], scale_draws=np.exp(out[:, -1]),
        acceptance=accepted / max(n_post, 1), n_iter=mcmc.iterations,
    )
    return fit


def fit_aft_bayes(records, spec, prior: AftPrior = AftPrior(), mcmc: AftMcmc = AftMcmc()) -> AftFit:
    """Adaptive random-walk Metropolis on ``(theta, log nu)``.

    The proposal starts from the Laplace covariance at the MLE and is tuned
    (scale towards 23% acceptance, covariance towards the empirical one)
    during burn-in only, so retained draws come from a fixed kernel.
    A prior SD of 0 pins that parameter at its prior mean.
    """
    X, logt, d = _arrays(records, spec)
    return fit_aft_bayes_arrays(X, logt, d, spec, prior, mcmc)


# ---------------------------------------------------------------------------
# derived quantities


def percentile_interval(draws, level: float = 0.95) -> tuple[float, float]:
    a = (1 - level) / 2
    lo, hi = np.quantile(np.asarray(draws, dtype=float), [a, 1 - a])
    return float(lo), float(hi)


def _group_effect(coef, spec: DesignMatrixSpec, levels) -> np.ndarray:
    b = spec.blocks()
    if b["group"].size == 0:
        raise ValueError("fit has no group main effect")
    out = np.asarray(coef)[..., b["group"][0]]
    if b["group_cov"].size:
        out = out + np.asarray(coef)[..., b["group_cov"]] @ spec.dummies(levels, spec.group_covariate)
    return out


def disparity(fit: AftFit, levels: Sequence[str] | None = None, level: float = 0.95) -> IntervalSummary:
    """Ratio of mean survival, group 1 over group 0: exp(gamma1 [+ interactions at ``levels``])."""
    if fit.spec.degree:
        raise ValueError("disparity needs the model without mediator terms")
    if levels is None:
        if fit.spec.group_covariate:
            raise ValueError("fit has group-by-covariate terms; pass the covariate levels")
        levels = tuple(f.levels[0] for f in fit.spec.schema.factors)
    point = float(np.exp(_group_effect(fit.coef, fit.spec, levels)))
    kind = "credible" if fit.kind == "Bayesian" else "bootstrap-percentile"
    if fit.n_draws:
        lo, hi = percentile_interval(np.exp(_group_effect(fit.coef_draws, fit.spec, levels)), level)
        lo, hi = min(lo, point), max(hi, point)
    else:
        lo = hi = point
    return IntervalSummary(point, lo, hi, kind)


def disparity_draws(fit: AftFit, levels: Sequence[str] | None = None) -> np.ndarray:
    if levels is None:
        levels = tuple(f.levels[0] for f in fit.spec.schema.factors)
    return np.exp(_group_effect(fit.coef_draws, fit.spec, levels))


def expected_survival(coef, log_scale_or_scale, x, *, log_scale: bool = False) -> float:
    """E[T | x] = exp(x' theta) Gamma(1 + nu)."""
    nu = math.exp(log_scale_or_scale) if log_scale else float(log_scale_or_scale)
    if not nu > -1:
        raise ValueError("scale must exceed -1 for a finite mean")
    return float(np.exp(np.dot(x, coef) + gammaln(1.0 + nu)))


def lrt_compare(fit_full: AftFit, fit_nested: AftFit) -> tuple[float, int, float]:
    """Likelihood-ratio statistic, degrees of freedom and chi-square p-value."""
    full = fit_full.spec.column_names()
    nested = fit_nested.spec.column_names()
    if not set(nested) <= set(full):
        raise ValueError("nested model's columns are not a subset of the full model's")
    df = len(full) - len(nested)
    stat = max(0.0, 2.0 * (fit_full.loglik - fit_nested.loglik))
    p = 1.0 if df == 0 else float(stats.chi2.sf(stat, df))
    if df == 0:
        stat = 0.0
    return stat, df, p


def write_fit_summary(fit: AftFit, path: str | Path, level: float = 0.95) -> None:
    """CSV ``term,estimate,lower,upper``; intervals from draws, else Wald on the MLE."""
    names = fit.names + ["log(scale)"]
    est = np.append(fit.coef, fit.log_scale)
    if fit.n_draws:
        dr = np.column_stack([fit.coef_draws, np.log(fit.scale_draws)])
        a = (1 - level) / 2
        lo, hi = np.quantile(dr, [a, 1 - a], axis=0)
    elif fit.cov is not None:
        zc = stats.norm.ppf(0.5 + level / 2)
        se = np.sqrt(np.diag(fit.cov))
        lo, hi = est - zc * se, est + zc * se
    else:
        lo = hi = est
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "estimate", "lower", "upper"])
        for row in zip(names, est, lo, hi):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def write_draws(fit: AftFit, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fit.names + ["scale"])
        for c, s in zip(fit.coef_draws, fit.scale_draws):
            w.writerow([repr(float(v)) for v in c] + [repr(float(s))])
