import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from rdmediation.core import CovariateStratum, DesignMatrixSpec, Schema, SubjectRecord
from rdmediation.lddp import ConditionalDensityGrid, LddpFit, eval_density
from rdmediation.mediators import LinearMediatorFit, mediator_design, rd_linear_counterfactual
from rdmediation.aft import AftFit
from rdmediation.rd import (
    RdOverflowError,
    assemble_result,
    interval_summary,
    percent_reduction,
    rd_conditional,
    rd_from_mediator_draws,
    rd_marginal,
    stratum_weights,
    write_draws_csv,
    write_results_csv,
)

SPEC = DesignMatrixSpec(degree=1, group_mediator=True)
THETA = np.array([7.56, -0.88, 0.029, 0.022])
ALL = CovariateStratum((), 0)


def _normal_grid(mu, sd, T=1, n=2001):
    grid = np.linspace(mu - 9 * sd, mu + 9 * sd, n)
    return ConditionalDensityGrid(ALL, grid, np.tile(stats.norm.pdf(grid, mu, sd), (T, 1)),
                                  np.tile(stats.norm.cdf(grid, mu, sd), (T, 1)))


def _mixture_grid(w, mu, sd, n=4001):
    grid = np.linspace(10, 50, n)
    f = sum(a * stats.norm.pdf(grid, m, s) for a, m, s in zip(w, mu, sd))
    F = sum(a * stats.norm.cdf(grid, m, s) for a, m, s in zip(w, mu, sd))
    return ConditionalDensityGrid(ALL, grid, f[None], F[None])


def test_normal_mgf_oracle():
    dens = _normal_grid(27, 3.5, T=400)
    draws = rd_conditional(dens, np.tile(THETA, (400, 1)), SPEC, (), 1000, seed=1)
    closed = math.exp(-0.88 + 0.022 * 27 + (0.051**2 - 0.029**2) * 3.5**2 / 2)
    assert abs(draws.mean() - closed) < 0.002


def test_trinomial_quadrature_oracle():
    w, mu, sd = (0.4, 0.35, 0.25), (23, 28, 32), (1.5, 1.5, 1.5)
    dens = _mixture_grid(w, mu, sd)
    pdf = lambda m: sum(a * stats.norm.pdf(m, b, c) for a, b, c in zip(w, mu, sd))
    num = integrate.quad(lambda m: math.exp(0.051 * m) * pdf(m), 0, 60, points=mu)[0]
    den = integrate.quad(lambda m: math.exp(0.029 * m) * pdf(m), 0, 60, points=mu)[0]
    truth = math.exp(-0.88) * num / den
    T = 300
    dens = ConditionalDensityGrid(ALL, dens.grid, np.repeat(dens.density, T, 0), np.repeat(dens.cdf, T, 0))
    draws = rd_conditional(dens, np.tile(THETA, (T, 1)), SPEC, (), 1000, seed=2)
    assert abs(draws.mean() - truth) < 0.002


def test_invariance_to_intercept_and_scale():
    rng = np.random.default_rng(0)
    coef = THETA + rng.normal(0, 0.01, (50, 4))
    m = rng.normal(27, 3.5, (50, 500))
    base = rd_from_mediator_draws(coef, SPEC, (), m)
    shifted = coef.copy()
    shifted[:, 0] += 3.7
    assert_allclose(rd_from_mediator_draws(shifted, SPEC, (), m), base, rtol=1e-12)
    # the engine takes no scale argument; the scale draws of a fit never enter
    no_inter = coef.copy()
    no_inter[:, 3] = 0.0
    assert_allclose(rd_from_mediator_draws(no_inter, SPEC, (), m), np.exp(no_inter[:, 1]), rtol=1e-13)


def test_stratum_group_effect_exact():
    schema = Schema.from_dict({"age": ["y", "o"]})
    spec = DesignMatrixSpec(schema=schema, degree=2, center=27, group_mediator=True,
                            group_covariate=("age",), mediator_covariate=("age",))
    rng = np.random.default_rng(1)
    coef = rng.normal(0, 0.05, spec.n_columns)
    coef[spec.blocks()["group_med"]] = 0.0
    out = rd_from_mediator_draws(coef, spec, ("o",), rng.normal(27, 3, 300))
    b = spec.blocks()
    assert_allclose(out, math.exp(coef[b["group"][0]] + coef[b["group_cov"][0]]), rtol=1e-13)


def test_shift_multiplies_by_exp():
    dens = _normal_grid(27, 3.5)
    delta = 1.5
    moved = ConditionalDensityGrid(ALL, dens.grid + delta, dens.density, dens.cdf)
    a = rd_conditional(dens, THETA[None], SPEC, (), 2000, seed=3)
    b = rd_conditional(moved, THETA[None], SPEC, (), 2000, seed=3)
    assert_allclose(b / a, math.exp(0.022 * delta), rtol=1e-3)


def test_single_normal_lddp_matches_linear():
    T = 200
    fit = LddpFit(
        spec=DesignMatrixSpec(group=False, covariates=False), beta=np.full((T, 1, 1), 27.0),
        sigma2=np.full((T, 1), 3.5**2), weights=np.ones((T, 1)), alpha=np.ones(T), mu_b=np.zeros((T, 1)),
        S_b=np.ones((T, 1, 1)), tau2=np.ones(T),
    )
    grid = np.linspace(5, 50, 2000)
    dens = eval_density(fit, (), grid)
    d = rd_conditional(dens, np.tile(THETA, (T, 1)), SPEC, (), 1000, seed=4)
    lin = LinearMediatorFit(mediator_design(Schema()), np.array([27.0]), 3.5)
    aft = AftFit(SPEC, THETA, 0.0)
    l = np.array([rd_linear_counterfactual(lin, aft, (), 1000, seed=100 + s) for s in range(T)])
    se = math.sqrt(d.var(ddof=1) / T + l.var(ddof=1) / T)
    assert abs(d.mean() - l.mean()) < 3 * se


def test_pairing_required():
    dens = _normal_grid(27, 3.5, T=5)
    with pytest.raises(ValueError, match="paired"):
        rd_conditional(dens, np.tile(THETA, (4, 1)), SPEC)


def test_overflow_reported():
    m = np.array([1e4, 2e4])
    with pytest.raises(RdOverflowError, match="mediator range"):
        rd_from_mediator_draws(np.array([0.0, 800.0, 0.0, 0.0]), SPEC, (), m)
    # large exponents are fine in log space
    big = rd_from_mediator_draws(np.array([0.0, 0.0, 5.0, 0.1]), SPEC, (), np.array([200.0, 210.0]))
    assert np.isfinite(big)


def test_marginal():
    d = np.array([[0.5, 0.7, 0.9]])
    assert_array_equal(rd_marginal(d, np.ones(1)), d[0])
    same = np.vstack([d[0], d[0]])
    assert_allclose(rd_marginal(same, [0.3, 0.7]), d[0])
    const = np.array([np.full(4, 0.8), np.full(4, 1.2)])
    assert_allclose(rd_marginal(const, [0.25, 0.75]), 1.1)
    with pytest.raises(ValueError):
        rd_marginal(const, [0.5, 0.6])
    with pytest.raises(ValueError):
        rd_marginal(const, [1.0])


def test_percent_reduction():
    assert percent_reduction(np.full(5, 0.8), np.full(5, 0.8)).point == 0.0
    assert_allclose(percent_reduction([0.83], [0.86]).point, -0.0361, atol=1e-4)
    assert percent_reduction([0.5], [0.0]).point == 1.0
    with pytest.raises(ValueError):
        percent_reduction([0.0], [0.5])


def test_interval_summary():
    s = interval_summary(np.full(10, 2.5))
    assert (s.point, s.lower, s.upper) == (2.5, 2.5, 2.5)
    s = interval_summary(np.arange(1, 101))
    assert_allclose([s.lower, s.upper], [3.475, 97.525])
    assert s.point == 50.5
    with pytest.raises(ValueError):
        interval_summary([])


def test_stratum_weights_populations():
    schema = Schema.from_dict({"sex": ["m", "f"]})
    recs = [SubjectRecord(1.0, True, g, 25.0, (s,)) for g, s in [(1, "m"), (1, "f"), (1, "f"), (0, "m")]]
    strata = [CovariateStratum(("m",), 0), CovariateStratum(("f",), 1)]
    assert_allclose(stratum_weights(recs, strata), [1 / 3, 2 / 3])
    assert_allclose(stratum_weights(recs, strata, "reference"), [1, 0])
    assert_allclose(stratum_weights(recs, strata, "pooled"), [0.5, 0.5])


def test_assemble_and_write(tmp_path):
    strata = [CovariateStratum(("m",), 0), CovariateStratum(("f",), 1)]
    per = {("m",): np.array([0.7, 0.8, 0.9])}
    disp = {("m",): np.array([0.6, 0.7, 0.8]), ("f",): np.array([0.5, 0.5, 0.5])}
    res = assemble_result("Density", per, strata, np.array([0.4, 0.6]), disp)
    assert [s.label for s in res.unavailable] == ["f"]
    assert_allclose(res.weights, [1.0])
    assert_allclose(res.marginal_draws, per[("m",)])
    write_results_csv([res], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "stratum,method,quantity,estimate,lower,upper"
    assert "f,Density,rd,,," in lines
    write_draws_csv([res], tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[1] == "m,Density,0,0.7"
