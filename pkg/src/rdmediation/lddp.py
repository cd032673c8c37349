"""Linear dependent Dirichlet process mixture for conditional mediator densities.

The model is a DP mixture of normal linear regressions,

    m_i | G ~ int N(m_i | x_i' beta, sigma^2) dG(beta, sigma^2),   G ~ DP(alpha G0),
    G0 = N_p(beta | mu_b, S_b) x Gamma(sigma^-2 | tau1/2, tau2/2),

with hyperpriors alpha ~ Gamma(a0, b0), tau2 ~ Gamma(taus1/2, taus2/2),
mu_b ~ N_p(m0, S0) and S_b ~ IW(nu, Psi).  It is fitted with a blocked Gibbs
sampler on the stick-breaking representation truncated at ``H`` atoms, which
makes every retained draw of G_x a finite normal mixture that can be evaluated
on a grid.

Gamma distributions are shape/rate.  The inverse-Wishart follows the
convention in which ``E[S_b] = Psi^{-1} / (nu - p - 1)``; the prior stores
``Psi^{-1}`` directly as :attr:`LddpPriors.psi_inv`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .core import (
    CovariateStratum,
    DesignMatrixSpec,
    Schema,
    SubjectRecord,
    design_matrix,
    spec_from_dict,
    spec_to_dict,
)

logger = logging.getLogger(__name__)

FIT_FORMAT_VERSION = 1
SIGMA2_FLOOR = 1e-8
_LOG_2PI = np.log(2 * np.pi)


class LddpError(RuntimeError):
    """Numerical failure inside the sampler."""


@dataclass
class LddpPriors:
    a0: float = 10.0
    b0: float = 1.0
    tau1: float = 6.01
    taus1: float = 6.01
    taus2: float = 2.01
    m0: np.ndarray | None = None
    S0: np.ndarray | None = None
    nu: float = 9.0
    psi_inv: np.ndarray | None = None

    def validate(self, p: int) -> None:
        for name in ("a0", "b0", "tau1", "taus1", "taus2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior {name} must be positive")
        if self.m0 is None or self.S0 is None or self.psi_inv is None:
            raise ValueError("m0, S0 and psi_inv must be set (see default_priors)")
        if np.shape(self.m0) != (p,) or np.shape(self.S0) != (p, p) or np.shape(self.psi_inv) != (p, p):
            raise ValueError(f"prior dimensions do not match design dimension {p}")
        if not self.nu > p - 1:
            raise ValueError(f"nu must exceed p - 1 = {p - 1}")
        for name in ("S0", "psi_inv"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.any(np.linalg.eigvalsh(M) <= 0):
                raise ValueError(f"{name} must be symmetric positive definite")


def default_priors(X: np.ndarray, y: np.ndarray, **overrides) -> LddpPriors:
    """Data-dependent centering: least-squares m0, S0 = 1000 (X'X)^-1, Psi^-1 = S0."""
    XtX = X.T @ X
    if np.linalg.matrix_rank(XtX) < X.shape[1]:
        raise np.linalg.LinAlgError("design matrix is rank deficient; data-dependent priors undefined")
    XtX_inv = np.linalg.inv(XtX)
    XtX_inv = (XtX_inv + XtX_inv.T) / 2
    m0 = XtX_inv @ X.T @ y
    S0 = 1000.0 * XtX_inv
    kw = dict(m0=m0, S0=S0, psi_inv=S0.copy())
    kw.update(overrides)
    return LddpPriors(**kw)


@dataclass(frozen=True)
class McmcConfig:
    H: int = 30
    iterations: int = 10_000
    burn_in: int = 2_000
    thin: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("truncation H must be positive")
        if min(self.iterations, self.thin) < 1 or self.burn_in < 0:
            raise ValueError("iterations and thin must be positive, burn_in non-negative")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class LddpData:
    X: np.ndarray
    y: np.ndarray
    XX: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        n, p = self.X.shape
        self.XX = (self.X[:, :, None] * self.X[:, None, :]).reshape(n, p * p)


@dataclass
class LddpState:
    labels: np.ndarray
    V: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    alpha: float
    mu_b: np.ndarray
    S_b: np.ndarray
    tau2: float
    iteration: int = 0

    @property
    def weights(self) -> np.ndarray:
        return stick_breaking_weights(self.V)

    def copy(self) -> "LddpState":
        return LddpState(
            self.labels.copy(), self.V.copy(), self.beta.copy(), self.sigma2.copy(),
            float(self.alpha), self.mu_b.copy(), self.S_b.copy(), float(self.tau2), self.iteration,
        )


def stick_breaking_weights(V: np.ndarray) -> np.ndarray:
    """w_j = V_j prod_{l<j} (1 - V_l) along the last axis; V_H should be 1."""
    V = np.asarray(V, dtype=float)
    rest = np.cumprod(1.0 - V, axis=-1)
    prev = np.concatenate([np.ones(V.shape[:-1] + (1,)), rest[..., :-1]], axis=-1)
    return V * prev


# ---------------------------------------------------------------------------
# Gibbs updates


def _sample_labels(state: LddpState, data: LddpData, rng: np.random.Generator) -> np.ndarray:
    w = state.weights
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    mean = data.X @ state.beta.T
    s2 = state.sigma2
    logp = logw - 0.5 * (_LOG_2PI + np.log(s2)) - 0.5 * (data.y[:, None] - mean) ** 2 / s2
    logp -= logp.max(axis=1, keepdims=True)
    cum = np.cumsum(np.exp(logp), axis=1)
    u = rng.random(len(data.y)) * cum[:, -1]
    labels = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(labels, len(w) - 1)


def _sample_sticks(counts: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    H = len(counts)
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0]])
    V = rng.beta(1.0 + counts, alpha + tail)
    V[H - 1] = 1.0
    return V


def _sample_atoms(state, data, counts, onehot, priors, rng):
    H, p = state.beta.shape
    XtX = (onehot.T @ data.XX).reshape(H, p, p)
    Xty = onehot.T @ (data.X * data.y[:, None])
    Sb_inv = np.linalg.inv(state.S_b)
    Sb_inv = (Sb_inv + Sb_inv.T) / 2
    prior_lin = Sb_inv @ state.mu_b

    prec_sigma = 1.0 / state.sigma2
    prec = Sb_inv[None] + XtX * prec_sigma[:, None, None]
    lin = prior_lin[None] + Xty * prec_sigma[:, None]
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise LddpError(f"atom precision factorization failed at iteration {state.iteration}") from exc
    mean = np.linalg.solve(prec, lin[..., None])[..., 0]
    z = rng.standard_normal((H, p))
    beta = mean + np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]

    resid = data.y - np.einsum("np,np->n", data.X, beta[state.labels])
    ssr = np.bincount(state.labels, weights=resid**2, minlength=H)
    shape = priors.tau1 / 2 + counts / 2
    rate = state.tau2 / 2 + ssr / 2
    precision = rng.gamma(shape, 1.0 / rate)
    sigma2 = np.maximum(1.0 / precision, SIGMA2_FLOOR)
    return beta, sigma2


def _sample_alpha(V: np.ndarray, priors: LddpPriors, rng) -> float:
    H = len(V)
    if H == 1:
        return float(rng.gamma(priors.a0, 1.0 / priors.b0))
    v = np.minimum(V[:-1], 1.0 - 1e-15)
    rate = priors.b0 - np.sum(np.log1p(-v))
    return float(rng.gamma(priors.a0 + H - 1, 1.0 / rate))


def _sample_mu_b(state, priors, rng) -> np.ndarray:
    H = state.beta.shape[0]
    S0_inv = np.linalg.inv(priors.S0)
    Sb_inv = np.linalg.inv(state.S_b)
    prec = S0_inv + H * Sb_inv
    prec = (prec + prec.T) / 2
    cov = np.linalg.inv(prec)
    cov = (cov + cov.T) / 2
    mean = cov @ (S0_inv @ priors.m0 + Sb_inv @ state.beta.sum(axis=0))
    return rng.multivariate_normal(mean, cov, method="cholesky")


def _sample_S_b(state, priors, rng) -> np.ndarray:
    H = state.beta.shape[0]
    d = state.beta - state.mu_b
    scale = priors.psi_inv + d.T @ d
    scale = (scale + scale.T) / 2
    S = stats.invwishart.rvs(df=priors.nu + H, scale=scale, random_state=rng)
    return np.atleast_2d(S)


def _sample_tau2(state, priors, rng) -> float:
    H = len(state.sigma2)
    shape = priors.taus1 / 2 + H * priors.tau1 / 2
    rate = priors.taus2 / 2 + np.sum(1.0 / state.sigma2) / 2
    return float(rng.gamma(shape, 1.0 / rate))


def gibbs_sweep(
    state: LddpState,
    data: LddpData,
    priors: LddpPriors,
    rng: np.random.Generator,
    fixed: Sequence[str] = (),
) -> LddpState:
    """One full blocked-Gibbs cycle; returns a new state.

    ``fixed`` names hyperparameters (``alpha``, ``mu_b``, ``S_b``, ``tau2``)
    to hold at their current values, which is how the conjugate special cases
    are checked in the tests.
    """
    s = state.copy()
    s.iteration += 1
    H = len(s.V)
    s.labels = _sample_labels(s, data, rng)
    counts = np.bincount(s.labels, minlength=H).astype(float)
    s.V = _sample_sticks(counts, s.alpha, rng)
    onehot = np.zeros((len(s.labels), H))
    onehot[np.arange(len(s.labels)), s.labels] = 1.0
    s.beta, s.sigma2 = _sample_atoms(s, data, counts, onehot, priors, rng)
    if "alpha" not in fixed:
        s.alpha = _sample_alpha(s.V, priors, rng)
    if "mu_b" not in fixed:
        s.mu_b = _sample_mu_b(s, priors, rng)
    if "S_b" not in fixed:
        try:
            s.S_b = _sample_S_b(s, priors, rng)
        except np.linalg.LinAlgError as exc:
            raise LddpError(f"S_b update failed at iteration {s.iteration}") from exc
    if "tau2" not in fixed:
        s.tau2 = _sample_tau2(s, priors, rng)
    return s


def initial_state(data: LddpData, priors: LddpPriors, H: int, rng: np.random.Generator, n_init: int = 10) -> LddpState:
    """Start from ``n_init`` clusters of least-squares residual quantiles.

    Occupied atoms start spread over the residual range so the sampler does
    not have to grow the atom scale S_b from its (tight) prior before it can
    represent several modes.
    """
    n, p = data.X.shape
    if not np.all(data.X[:, 0] == 1.0):
        raise ValueError("mediator design must start with an intercept column")
    resid = data.y - data.X @ priors.m0
    k = max(1, min(n_init, H, n))
    ranks = np.argsort(np.argsort(resid, kind="stable"), kind="stable")
    labels = (ranks * k) // n
    beta = np.tile(priors.m0, (H, 1)).astype(float)
    sigma2 = np.full(H, max(float(np.var(resid)), SIGMA2_FLOOR))
    for j in range(k):
        r = resid[labels == j]
        beta[j, 0] += r.mean()
        if r.size > 1:
            sigma2[j] = max(float(r.var()), 1e-2 * sigma2[j], SIGMA2_FLOOR)
    d = beta[:k] - beta[:k].mean(axis=0)
    S_b = (priors.psi_inv + d.T @ d) / max(priors.nu + k - p - 1, 1.0)
    alpha = priors.a0 / priors.b0
    counts = np.bincount(labels, minlength=H).astype(float)
    V = _sample_sticks(counts, alpha, rng)
    return LddpState(
        labels=labels, V=V, beta=beta, sigma2=sigma2, alpha=alpha, mu_b=priors.m0.copy(),
        S_b=S_b, tau2=float(priors.taus1 / priors.taus2), iteration=0,
    )


# ---------------------------------------------------------------------------
# fitting


@dataclass
class LddpFit:
    """Retained draws; arrays are indexed by retained iteration first."""

    spec: DesignMatrixSpec
    beta: np.ndarray      # (T, H, p)
    sigma2: np.ndarray    # (T, H)
    weights: np.ndarray   # (T, H)
    alpha: np.ndarray     # (T,)
    mu_b: np.ndarray      # (T, p)
    S_b: np.ndarray       # (T, p, p)
    tau2: np.ndarray      # (T,)
    mcmc: McmcConfig | None = None

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def component_means(self, x: np.ndarray) -> np.ndarray:
        return self.beta @ np.asarray(x, dtype=float)


def lddp_design(records: Sequence[SubjectRecord], schema: Schema, group_covariate=()) -> DesignMatrixSpec:
    """Mediator-model design: intercept, group (only if both groups present) and covariates."""
    groups = {r.group for r in records}
    return DesignMatrixSpec(
        schema=schema, intercept=True, group=len(groups) > 1, covariates=True,
        degree=0, group_covariate=tuple(group_covariate) if len(groups) > 1 else (),
    )


def fit_lddp(
    records: Sequence[SubjectRecord],
    spec: DesignMatrixSpec | None = None,
    priors: LddpPriors | None = None,
    mcmc: McmcConfig = McmcConfig(),
    schema: Schema | None = None,
) -> LddpFit:
    """Fit the mixture to the mediator values of ``records``.

    ``spec`` defaults to :func:`lddp_design`; priors default to the
    data-dependent centering of :func:`default_priors`.
    """
    if len(records) == 0:
        raise ValueError("fit_lddp needs at least one record")
    if len(records) < 2:
        raise ValueError("fit_lddp needs at least two records")
    if spec is None:
        spec = lddp_design(records, schema or Schema())
    if spec.degree:
        raise ValueError("mediator-model design must not contain mediator terms")
    X = design_matrix(records, spec)
    y = np.array([r.mediator for r in records], dtype=float)
    return fit_lddp_arrays(X, y, spec, priors, mcmc)


def fit_lddp_arrays(X, y, spec, priors=None, mcmc: McmcConfig = McmcConfig()) -> LddpFit:
    data = LddpData(X, y)
    n, p = data.X.shape
    if priors is None:
        priors = default_priors(data.X, data.y)
    priors.validate(p)
    rng = np.random.default_rng(mcmc.seed)
    state = initial_state(data, priors, mcmc.H, rng)

    T = mcmc.n_retained
    H = mcmc.H
    out = dict(
        beta=np.empty((T, H, p)), sigma2=np.empty((T, H)), weights=np.empty((T, H)),
        alpha=np.empty(T), mu_b=np.empty((T, p)), S_b=np.empty((T, p, p)), tau2=np.empty(T),
    )
    k = 0
    for it in range(1, mcmc.iterations + 1):
        state = gibbs_sweep(state, data, priors, rng)
        if it > mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0 and k < T:
            out["beta"][k] = state.beta
            out["sigma2"][k] = state.sigma2
            out["weights"][k] = state.weights
            out["alpha"][k] = state.alpha
            out["mu_b"][k] = state.mu_b
            out["S_b"][k] = state.S_b
            out["tau2"][k] = state.tau2
            k += 1
    return LddpFit(spec=spec, mcmc=mcmc, **out)


# ---------------------------------------------------------------------------
# densities


@dataclass
class ConditionalDensityGrid:
    stratum: CovariateStratum
    grid: np.ndarray     # (G,)
    density: np.ndarray  # (T, G)
    cdf: np.ndarray      # (T, G)

    @property
    def n_draws(self) -> int:
        return self.density.shape[0]

    def mean_cdf(self) -> np.ndarray:
        return self.cdf.mean(axis=0)

    def mean_density(self) -> np.ndarray:
        return self.density.mean(axis=0)


def default_grid(mediators, n_points: int = 200) -> np.ndarray:
    """Equally spaced grid over [min - 2 SD, max + 2 SD] of the pooled mediator."""
    m = np.asarray(mediators, dtype=float)
    sd = m.std(ddof=1) if m.size > 1 else 1.0
    return np.linspace(m.min() - 2 * sd, m.max() + 2 * sd, n_points)


def mixture_on_grid(weights, means, sds, grid) -> tuple[np.ndarray, np.ndarray]:
    """Density and CDF of normal mixtures; leading dims of the parameters broadcast."""
    grid = np.asarray(grid, dtype=float)
    z = (grid[..., None, :] - means[..., :, None]) / sds[..., :, None]
    pdf = np.exp(-0.5 * z**2) / (np.sqrt(2 * np.pi) * sds[..., :, None])
    f = np.einsum("...h,...hg->...g", weights, pdf)
    F = np.einsum("...h,...hg->...g", weights, ndtr(z))
    return f, F


def eval_density(fit: LddpFit, stratum: CovariateStratum | Sequence[str], grid) -> ConditionalDensityGrid:
    """Per-draw density and CDF of the reference-group (group 0) mediator law."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if not isinstance(stratum, CovariateStratum):
        stratum = CovariateStratum(tuple(stratum), -1)
    x = fit.spec.row(0, 0.0, stratum.levels)
    means = fit.component_means(x)
    sds = np.sqrt(fit.sigma2)
    f = np.empty((fit.n_draws, grid.size))
    F = np.empty_like(f)
    chunk = 256
    for a in range(0, fit.n_draws, chunk):
        b = slice(a, a + chunk)
        f[b], F[b] = mixture_on_grid(fit.weights[b], means[b], sds[b], grid)
    np.clip(F, 0.0, 1.0, out=F)
    F = np.maximum.accumulate(F, axis=1)
    return ConditionalDensityGrid(stratum, grid, f, F)


def inverse_cdf_sample(grid, cdf, u):
    """Generalized inverse of a tabulated CDF by linear interpolation.

    With ``i`` the first knot where ``cdf[i] >= u``, the result interpolates
    linearly between knots ``i - 1`` and ``i``, so flat stretches of the CDF
    are skipped.  ``u`` at or below ``cdf[0]`` maps to the grid minimum and
    above ``cdf[-1]`` to the grid maximum.
    """
    grid = np.asarray(grid, dtype=float)
    cdf = np.asarray(cdf, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    i = np.searchsorted(cdf, u_arr, side="left")
    lo = np.clip(i - 1, 0, grid.size - 1)
    hi = np.clip(i, 0, grid.size - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = (u_arr - cdf[lo]) / (cdf[hi] - cdf[lo])
    out = grid[lo] + np.nan_to_num(frac, nan=1.0, posinf=1.0, neginf=0.0) * (grid[hi] - grid[lo])
    out = np.where(i == 0, grid[0], out)
    out = np.where(i >= grid.size, grid[-1], out)
    return out if u_arr.ndim else float(out)


def write_density_csv(grids: Sequence[ConditionalDensityGrid], path: str | Path, mean_only: bool = False) -> None:
    """Write ``stratum,iteration,m,f,F`` rows; ``mean_only`` writes iteration -1 posterior means."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "iteration", "m", "f", "F"])
        for g in grids:
            if mean_only:
                rows = [(-1, g.mean_density(), g.mean_cdf())]
            else:
                rows = [(t, g.density[t], g.cdf[t]) for t in range(g.n_draws)]
            for t, f, F in rows:
                for m, fv, Fv in zip(g.grid, f, F):
                    w.writerow([g.stratum.label, t, repr(float(m)), repr(float(fv)), repr(float(Fv))])


def save_fit(fit: LddpFit, path: str | Path) -> None:
    """Serialize a fit to a versioned ``.npz`` archive."""
    meta = {
        "version": FIT_FORMAT_VERSION,
        "spec": spec_to_dict(fit.spec),
        "mcmc": asdict(fit.mcmc) if fit.mcmc else None,
    }
    np.savez_compressed(
        path, meta=np.array(json.dumps(meta)), beta=fit.beta, sigma2=fit.sigma2, weights=fit.weights,
        alpha=fit.alpha, mu_b=fit.mu_b, S_b=fit.S_b, tau2=fit.tau2,
    )


def load_fit(path: str | Path) -> LddpFit:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != FIT_FORMAT_VERSION:
            raise ValueError(f"unsupported fit format version {meta.get('version')}")
        arrays = {k: z[k] for k in ("beta", "sigma2", "weights", "alpha", "mu_b", "S_b", "tau2")}
    mcmc = McmcConfig(**meta["mcmc"]) if meta["mcmc"] else None
    return LddpFit(spec=spec_from_dict(meta["spec"]), mcmc=mcmc, **arrays)
