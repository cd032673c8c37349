"""Comparator mediator models: linear-normal, baseline-category logit, and the difference method."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .aft import AftFit, fit_aft_mle
from .core import DesignMatrixSpec, Schema, SubjectRecord, design_matrix, outcome_blocks
from .rd import rd_from_mediator_draws

logger = logging.getLogger(__name__)

BMI_CUTPOINTS = (25.0, 30.0, 35.0)
BMI_CATEGORY_NAMES = ("normal", "overweight", "obese-I", "obese-II/III")
SEPARATION_NORM = 50.0


class SeparationError(RuntimeError):
    pass


def categorize_bmi(m, cutpoints: Sequence[float] = BMI_CUTPOINTS):
    """0 below the first cutpoint, k for cutpoints[k-1] <= m < cutpoints[k].

    Values under 18.5 are not split off; underweight belongs to category 0.
    """
    arr = np.asarray(m, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("BMI must be positive")
    cat = np.searchsorted(np.asarray(cutpoints, dtype=float), arr, side="right")
    return int(cat) if np.ndim(m) == 0 else cat


def mediator_design(schema: Schema, group: bool = False, group_covariate: Sequence[str] = ()) -> DesignMatrixSpec:
    """Regressors of a mediator model: intercept, optional group, covariates, optional group x covariate."""
    return DesignMatrixSpec(
        schema=schema, intercept=True, group=group, covariates=True, degree=0,
        group_covariate=tuple(group_covariate) if group else (),
    )


# ---------------------------------------------------------------------------
# linear-normal mediator


@dataclass
class LinearMediatorFit:
    spec: DesignMatrixSpec
    coef: np.ndarray
    sd: float
    coef_draws: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    sd_draws: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def mean(self, levels: Sequence[str], group: int = 0) -> float:
        return float(self.spec.row(group, 0.0, levels) @ self.coef)


def _ols(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(y) - X.shape[1], 1)
    return coef, float(np.sqrt(resid @ resid / dof))


def fit_linear_mediator(
    records: Sequence[SubjectRecord], spec: DesignMatrixSpec, n_boot: int = 0, seed: int = 0,
) -> LinearMediatorFit:
    X = design_matrix(records, spec)
    y = np.array([r.mediator for r in records], dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("mediator design is rank deficient")
    coef, sd = _ols(X, y)
    if not sd > 0:
        raise ValueError("residual SD is zero")
    fit = LinearMediatorFit(spec, coef, sd)
    if n_boot:
        rng = np.random.default_rng(seed)
        cd, sdd = [], []
        n = len(y)
        while len(cd) < n_boot:
            idx = rng.integers(0, n, n)
            if np.linalg.matrix_rank(X[idx]) < X.shape[1]:
                continue
            c, s = _ols(X[idx], y[idx])
            cd.append(c)
            sdd.append(s)
        fit.coef_draws, fit.sd_draws = np.array(cd), np.array(sdd)
    return fit


def rd_linear_counterfactual(
    linfit: LinearMediatorFit, aft: AftFit, levels: Sequence[str] = (), n_draws: int = 1000,
    seed: int | np.random.Generator | None = 0, coef=None,
) -> float:
    """RD with the reference-group mediator law taken as the fitted normal.

    ``coef`` overrides the outcome coefficients (e.g. a bootstrap draw).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = rng.normal(linfit.mean(levels, group=0), linfit.sd, size=n_draws)
    theta = aft.coef if coef is None else coef
    return float(rd_from_mediator_draws(theta, aft.spec, levels, m))


def rd_linear_draws(
    linfit: LinearMediatorFit, aft: AftFit, levels: Sequence[str] = (), n_draws: int = 1000, seed=0,
) -> np.ndarray:
    """RD per paired bootstrap draw of the mediator and outcome fits (counterfactual simulation)."""
    B = min(len(linfit.coef_draws), aft.n_draws)
    if B == 0:
        raise ValueError("both fits need bootstrap draws")
    rng = np.random.default_rng(seed)
    x = linfit.spec.row(0, 0.0, levels)
    means = linfit.coef_draws[:B] @ x
    m = means[:, None] + linfit.sd_draws[:B, None] * rng.standard_normal((B, n_draws))
    return rd_from_mediator_draws(aft.coef_draws[:B], aft.spec, levels, m)


# ---------------------------------------------------------------------------
# baseline category logit


@dataclass
class BclFit:
    spec: DesignMatrixSpec
    coef: np.ndarray  # (K, p): logit of category k vs category 0
    cutpoints: tuple[float, ...] = BMI_CUTPOINTS
    loglik: float = float("nan")
    coef_draws: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))

    @property
    def n_categories(self) -> int:
        return self.coef.shape[0] + 1

    def probabilities(self, x, coef=None) -> np.ndarray:
        """Category probabilities (..., K+1) at design vector(s) ``x``."""
        coef = self.coef if coef is None else coef
        eta = np.asarray(x, dtype=float) @ np.asarray(coef).T
        eta = np.concatenate([np.zeros(eta.shape[:-1] + (1,)), eta], axis=-1)
        return np.exp(eta - logsumexp(eta, axis=-1, keepdims=True))


def _bcl_newton(X, Y, max_iter=100, tol=1e-9):
    n, p = X.shape
    K = Y.shape[1] - 1
    B = np.zeros((K, p))
    # intercept at the saturated solution speeds things up
    freq = Y.mean(axis=0)
    if np.allclose(X[:, 0], 1.0):
        B[:, 0] = np.log(freq[1:] / freq[0])

    def ll_of(Bm):
        eta = np.column_stack([np.zeros(n), X @ Bm.T])
        return float(np.sum(Y * eta) - np.sum(logsumexp(eta, axis=1)))

    ll = ll_of(B)
    for it in range(max_iter):
        eta = np.column_stack([np.zeros(n), X @ B.T])
        P = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))[:, 1:]
        g = (X.T @ (Y[:, 1:] - P)).T.ravel()  # (K*p,)
        Hm = np.empty((K * p, K * p))
        for k in range(K):
            for l in range(K):
                wkl = P[:, k] * ((k == l) - P[:, l])
                Hm[k * p:(k + 1) * p, l * p:(l + 1) * p] = -(X.T * wkl) @ X
        try:
            step = np.linalg.solve(-Hm, g)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix in the category model") from None
        t = 1.0
        while t > 1e-10:
            cand = B + t * step.reshape(K, p)
            ll_new = ll_of(cand)
            if ll_new >= ll - 1e-12:
                break
            t *= 0.5
        B, ll = cand, ll_new
        if np.linalg.norm(B) > SEPARATION_NORM:
            raise SeparationError(f"category coefficients diverge (norm {np.linalg.norm(B):.1f}); data are separated")
        if np.abs(g).max() < tol:
            break
    return B, ll


def fit_bcl(
    records: Sequence[SubjectRecord], spec: DesignMatrixSpec, cutpoints: Sequence[float] = BMI_CUTPOINTS,
    n_boot: int = 0, seed: int = 0,
) -> BclFit:
    """Multinomial (baseline-category) logit of mediator category on the design; Newton-Raphson."""
    X = design_matrix(records, spec)
    cats = categorize_bmi([r.mediator for r in records], cutpoints)
    K1 = len(cutpoints) + 1
    counts = np.bincount(cats, minlength=K1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"mediator categories {empty.tolist()} are empty; their logits diverge")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("category-model design is rank deficient")
    Y = np.eye(K1)[cats]
    B, ll = _bcl_newton(X, Y)
    fit = BclFit(spec, B, tuple(cutpoints), ll)
    if n_boot:
        rng = np.random.default_rng(seed)
        draws = []
        n = len(cats)
        tries = 0
        while len(draws) < n_boot and tries < 20 * n_boot:
            tries += 1
            idx = rng.integers(0, n, n)
            if np.any(np.bincount(cats[idx], minlength=K1) == 0):
                continue
            try:
                Bb, _ = _bcl_newton(X[idx], Y[idx])
            except SeparationError:
                continue
            draws.append(Bb)
        fit.coef_draws = np.array(draws)
    return fit


def bcl_outcome_spec(
    schema: Schema, cutpoints: Sequence[float] = BMI_CUTPOINTS, group_mediator: bool = True,
    group_covariate: Sequence[str] = (), mediator_covariate: Sequence[str] = (),
) -> DesignMatrixSpec:
    """Outcome model with category indicators in place of mediator powers."""
    return DesignMatrixSpec(
        schema=schema, degree=len(cutpoints), basis="category", cutpoints=tuple(cutpoints),
        group_mediator=group_mediator, group_covariate=tuple(group_covariate),
        mediator_covariate=tuple(mediator_covariate),
    )


def rd_bcl(bcl: BclFit, aft_coef, aft_spec: DesignMatrixSpec, levels: Sequence[str] = (), bcl_coef=None):
    """Closed-form RD of the category model in covariate pattern ``levels``.

    ``aft_coef`` may be ``(p,)`` or ``(B, p)``; with draws, ``bcl_coef``
    must be ``(B, K, p_m)`` to pair row by row.
    """
    if aft_spec.basis != "category" or aft_spec.degree != bcl.n_categories - 1:
        raise ValueError("outcome model must use the same mediator categories as the category model")
    blocks = outcome_blocks(aft_coef, aft_spec, levels)
    x = bcl.spec.row(0, 0.0, levels)
    coef = bcl.coef if bcl_coef is None else np.asarray(bcl_coef)
    eta = np.einsum("...kp,p->...k", coef, x)
    shape = np.broadcast_shapes(eta.shape, blocks.med.shape, blocks.group_med.shape)
    base = np.broadcast_to(eta + blocks.med, shape)
    shift = np.broadcast_to(blocks.group_med, shape)
    zero = np.zeros(shape[:-1] + (1,))
    den_terms = np.concatenate([zero, base], axis=-1)
    num_terms = np.concatenate([zero, base + shift], axis=-1)
    out = np.exp(blocks.group_effect + logsumexp(num_terms, axis=-1) - logsumexp(den_terms, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# difference method


def difference_spec(schema: Schema, center: float = 0.0) -> DesignMatrixSpec:
    """log T = theta0 + theta1 R + theta2 M + theta4'C: no interactions, linear mediator."""
    return DesignMatrixSpec(schema=schema, degree=1, center=center)


def rd_difference(records: Sequence[SubjectRecord], schema: Schema = Schema(), fit: AftFit | None = None) -> float:
    """exp(group coefficient) of the mediator-adjusted outcome model."""
    if fit is None:
        fit = fit_aft_mle(records, difference_spec(schema))
    return float(np.exp(fit.coef[fit.spec.blocks()["group"][0]]))
