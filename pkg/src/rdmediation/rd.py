"""Residual disparity after matching the comparison group's mediator law to the reference group's.

For covariate pattern ``c`` and an outcome model with mediator basis
``b_j(m)`` the residual disparity is

    RD(c) = exp(g(c)) * E[exp(sum_j (a_j(c) + s_j) b_j(M))] / E[exp(sum_j a_j(c) b_j(M))],

where ``M`` follows the reference-group mediator law in stratum ``c``,
``g(c) = theta1 + theta5'c``, ``a_j(c) = theta2j + theta6j'c`` and
``s_j = theta3j``.  Intercept, main covariate effects and the AFT scale all
cancel, so nothing here reads them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    CovariateStratum,
    DesignMatrixSpec,
    IntervalSummary,
    SubjectRecord,
    enumerate_strata,
    outcome_blocks,
    stratum_index,
)
from .lddp import ConditionalDensityGrid, inverse_cdf_sample


class RdOverflowError(FloatingPointError):
    pass


def rd_from_mediator_draws(coef, spec: DesignMatrixSpec, levels: Sequence[str], m) -> np.ndarray:
    """Monte Carlo RD from reference-law mediator draws.

    ``coef`` is ``(p,)`` or ``(T, p)``; ``m`` is ``(n,)`` shared by all
    coefficient rows or ``(T, n)`` paired row by row. Numerator and
    denominator use the same draws and are accumulated in log space.
    """
    coef = np.asarray(coef, dtype=float)
    m = np.asarray(m, dtype=float)
    blocks = outcome_blocks(coef, spec, levels)
    B = spec.mediator_basis(m)  # (..., n, q)
    a = np.einsum("...nq,...q->...n", B, blocks.med)
    s = np.einsum("...nq,...q->...n", B, blocks.group_med)
    with np.errstate(over="ignore", invalid="ignore"):
        log_num = logsumexp(a + s, axis=-1)
        log_den = logsumexp(a, axis=-1)
        out = np.exp(blocks.group_effect + log_num - log_den)
    if not np.all(np.isfinite(out)) or np.any(out <= 0):
        bad = np.flatnonzero(~np.isfinite(np.atleast_1d(out)) | (np.atleast_1d(out) <= 0))[0]
        mm = m if m.ndim == 1 else m[bad]
        raise RdOverflowError(
            f"RD integrand not finite for draw {bad}: mediator range [{mm.min():.4g}, {mm.max():.4g}], "
            f"coefficients {np.atleast_2d(coef)[bad if coef.ndim > 1 else 0]}"
        )
    return out


def rd_conditional(
    density: ConditionalDensityGrid,
    coef_draws: np.ndarray,
    spec: DesignMatrixSpec,
    levels: Sequence[str] | None = None,
    n_draws: int = 1000,
    seed: int | np.random.Generator | None = 0,
) -> np.ndarray:
    """RD draws pairing density iteration t with outcome-model draw t.

    For every t, ``n_draws`` mediator values come from the iteration-t CDF
    by inverse-CDF sampling on the grid.
    """
    coef_draws = np.atleast_2d(np.asarray(coef_draws, dtype=float))
    T = density.n_draws
    if coef_draws.shape[0] != T:
        raise ValueError(
            f"paired draws needed: density has {T} iterations, outcome model has {coef_draws.shape[0]}"
        )
    if levels is None:
        levels = density.stratum.levels
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random((T, n_draws))
    m = np.empty_like(u)
    for t in range(T):
        m[t] = inverse_cdf_sample(density.grid, density.cdf[t], u[t])
    return rd_from_mediator_draws(coef_draws, spec, levels, m)


def rd_marginal(per_stratum: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted average over strata of per-stratum RD draws, shape ``(S, T) -> (T,)``."""
    per_stratum = np.atleast_2d(np.asarray(per_stratum, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (per_stratum.shape[0],):
        raise ValueError(f"{weights.size} weights for {per_stratum.shape[0]} strata")
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0, atol=1e-12):
        raise ValueError("stratum weights must be non-negative and sum to 1")
    return weights @ per_stratum


def stratum_weights(
    records: Sequence[SubjectRecord], strata: Sequence[CovariateStratum], population: str = "comparison",
) -> np.ndarray:
    """Empirical stratum probabilities in the comparison group (1), reference group (0) or pooled."""
    groups = {"comparison": {1}, "reference": {0}, "pooled": {0, 1}}
    if population not in groups:
        raise ValueError(f"unknown weighting population {population!r}")
    keep = groups[population]
    pos = {s.levels: i for i, s in enumerate(strata)}
    counts = np.zeros(len(strata))
    for r in records:
        if r.group in keep and tuple(r.covariates) in pos:
            counts[pos[tuple(r.covariates)]] += 1
    if counts.sum() == 0:
        raise ValueError("no records of the weighting population fall in the given strata")
    return counts / counts.sum()


def interval_summary(draws, level: float = 0.95, kind: str = "credible") -> IntervalSummary:
    """Mean with equal-tailed empirical quantiles (linear interpolation)."""
    d = np.asarray(draws, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("no draws to summarize")
    a = (1 - level) / 2
    lo, hi = np.quantile(d, [a, 1 - a])
    point = float(d.mean())
    return IntervalSummary(point, min(float(lo), point), max(float(hi), point), kind)


def percent_reduction(disparity_draws, rd_draws, level: float = 0.95, kind: str = "credible") -> IntervalSummary:
    """Per-draw (disparity - RD) / disparity, summarized."""
    disp = np.asarray(disparity_draws, dtype=float)
    rd = np.asarray(rd_draws, dtype=float)
    if np.any(disp <= 0):
        raise ValueError("disparity draws must be positive")
    if disp.ndim and rd.ndim and disp.size != rd.size and disp.size != 1 and rd.size != 1:
        raise ValueError(f"cannot pair {disp.size} disparity draws with {rd.size} RD draws")
    return interval_summary((disp - rd) / disp, level, kind)


@dataclass
class StratumRd:
    stratum: CovariateStratum
    draws: np.ndarray
    summary: IntervalSummary
    reduction: IntervalSummary | None = None
    disparity: IntervalSummary | None = None


@dataclass
class RdResult:
    method: str
    strata: list[StratumRd] = field(default_factory=list)
    weights: np.ndarray | None = None
    marginal_draws: np.ndarray | None = None
    marginal: IntervalSummary | None = None
    disparity: IntervalSummary | None = None
    marginal_reduction: IntervalSummary | None = None
    unavailable: list[CovariateStratum] = field(default_factory=list)


def assemble_result(
    method: str,
    per_stratum: dict[tuple[str, ...], np.ndarray],
    strata: Sequence[CovariateStratum],
    weights: np.ndarray,
    disparity_draws: dict[tuple[str, ...], np.ndarray] | np.ndarray,
    kind: str = "credible",
) -> RdResult:
    """Build per-stratum and marginal summaries; strata absent from ``per_stratum`` are unavailable.

    Marginal weights are renormalized over the available strata.
    """
    res = RdResult(method)
    avail = [s for s in strata if s.levels in per_stratum]
    res.unavailable = [s for s in strata if s.levels not in per_stratum]
    if not avail:
        return res
    w = np.array([weights[list(strata).index(s)] for s in avail])
    if w.sum() <= 0:
        w = np.full(len(avail), 1.0 / len(avail))
    w = w / w.sum()

    def disp_for(levels):
        if isinstance(disparity_draws, dict):
            return disparity_draws[levels]
        return disparity_draws

    for s in avail:
        d = per_stratum[s.levels]
        dd = disp_for(s.levels)
        res.strata.append(
            StratumRd(s, d, interval_summary(d, kind=kind), percent_reduction(dd, d, kind=kind),
                      interval_summary(dd, kind=kind))
        )
    res.weights = w
    res.marginal_draws = rd_marginal(np.vstack([per_stratum[s.levels] for s in avail]), w)
    if isinstance(disparity_draws, dict):
        marg_disp = rd_marginal(np.vstack([disp_for(s.levels) for s in avail]), w)
    else:
        marg_disp = np.asarray(disparity_draws)
    res.disparity = interval_summary(marg_disp, kind=kind)
    res.marginal = interval_summary(res.marginal_draws, kind=kind)
    res.marginal_reduction = percent_reduction(marg_disp, res.marginal_draws, kind=kind)
    return res


def write_results_csv(results: Sequence[RdResult], path: str | Path) -> None:
    """``stratum,method,quantity,estimate,lower,upper``; marginal rows use stratum ``marginal``.

    Unavailable strata are written with empty estimates.
    """
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "method", "quantity", "estimate", "lower", "upper"])

        def row(label, method, qty, s: IntervalSummary | None):
            if s is None:
                w.writerow([label, method, qty, "", "", ""])
            else:
                w.writerow([label, method, qty, repr(s.point), repr(s.lower), repr(s.upper)])

        for res in results:
            for st in res.strata:
                row(st.stratum.label, res.method, "rd", st.summary)
                row(st.stratum.label, res.method, "disparity", st.disparity)
                row(st.stratum.label, res.method, "reduction", st.reduction)
            for st in res.unavailable:
                row(st.label, res.method, "rd", None)
            row("marginal", res.method, "rd", res.marginal)
            row("marginal", res.method, "disparity", res.disparity)
            row("marginal", res.method, "reduction", res.marginal_reduction)


def write_draws_csv(results: Sequence[RdResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "method", "draw", "rd"])
        for res in results:
            for st in res.strata:
                for t, v in enumerate(st.draws):
                    w.writerow([st.stratum.label, res.method, t, repr(float(v))])
            if res.marginal_draws is not None:
                for t, v in enumerate(res.marginal_draws):
                    w.writerow(["marginal", res.method, t, repr(float(v))])
