import json

import numpy as np
import pytest
from scipy import stats

from oracles import gaussian_copula_logpdf
from tvpcopula.copula import (
    CopulaFitConfig,
    CopulaPrior,
    GmcmParams,
    Parameterization,
    PitPanel,
    S1Params,
    S2Params,
    compute_pits,
    copula_log_prior,
    copula_target,
    covariance_param_count,
    expand_s1,
    expand_s2,
    fit_copula,
    fit_mode,
    gaussian_marginals,
    gmcm_log_density,
    mixture_cdf,
    mixture_quantile,
    pit_from_draws,
    sample_copula,
    search_s2_seeds,
    select_G,
    system_log_likelihood,
)
from tvpcopula.mala import fisher_gradient_check


def random_params(rng, G, n):
    """Valid normalised parameters: mu_1 = 0, unit-diagonal Omega_1, increasing weights."""
    p = np.sort(rng.dirichlet(np.full(G, 5.0)))
    while G > 1 and np.any(np.diff(p) <= 1e-3):
        p = np.sort(rng.dirichlet(np.full(G, 5.0)))
    mu = np.vstack([np.zeros(n), 0.7 * rng.standard_normal((G - 1, n))])
    covs = []
    for g in range(G):
        A = rng.standard_normal((n, n)) * 0.4
        S = A @ A.T + np.diag(rng.uniform(0.5, 1.5, n))
        if g == 0:
            d = 1 / np.sqrt(np.diag(S))
            S = S * np.outer(d, d)
        covs.append(S)
    return GmcmParams(p, mu, np.array(covs))


# --- PITs ------------------------------------------------------------------

def test_pit_single_draw_standard_normal():
    rng = np.random.default_rng(0)
    y = rng.normal(size=20)
    Z = rng.normal(size=(20, 2))
    v = pit_from_draws(y, Z, np.zeros((1, 20, 2)), np.zeros((1, 20)))
    np.testing.assert_allclose(v, stats.norm.cdf(y), rtol=1e-14)


def test_pit_at_conditional_median():
    rng = np.random.default_rng(1)
    S, T = 4000, 5
    beta = rng.normal(0, 0.3, size=(S, T, 1)) + 1.0
    Z = np.ones((T, 1))
    h = rng.normal(0, 0.2, size=(S, T))
    v = pit_from_draws(np.ones(T), Z, beta, h)
    assert np.all(np.abs(v - 0.5) < 4 * 0.5 / np.sqrt(S))


def test_pits_calibrated_under_correct_model():
    rng = np.random.default_rng(2)
    T = 3000
    Z = rng.normal(size=(T, 2))
    beta = np.cumsum(rng.normal(0, 0.05, size=(T, 2)), axis=0)
    h = 0.5 * np.sin(np.arange(T) / 50)
    y = np.einsum("tk,tk->t", Z, beta) + np.exp(h / 2) * rng.normal(size=T)
    v = pit_from_draws(y, Z, np.repeat(beta[None], 3, 0), np.repeat(h[None], 3, 0))
    assert stats.kstest(v, "uniform").pvalue > 0.001


def test_pit_errors_and_clipping():
    with pytest.raises(ValueError):
        pit_from_draws(np.zeros(3), np.zeros((3, 1)), np.zeros((0, 3, 1)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        compute_pits([], [])
    panel = PitPanel(np.array([[0.0, 1.0], [0.5, 0.5]]))
    assert panel.v.min() == 1e-10 and panel.v.max() == 1 - 1e-10
    with pytest.raises(ValueError):
        PitPanel(np.array([[1.5, 0.5]]))


# --- density ---------------------------------------------------------------

def test_independence_copula_is_zero():
    rng = np.random.default_rng(3)
    v = rng.uniform(size=(50, 3))
    np.testing.assert_allclose(gmcm_log_density(v, GmcmParams.gaussian(np.eye(3))), 0.0, atol=1e-12)


def test_gaussian_copula_at_median():
    R = np.array([[1.0, 0.5], [0.5, 1.0]])
    val = gmcm_log_density(np.array([0.5, 0.5]), GmcmParams.gaussian(R))
    assert val == pytest.approx(-0.5 * np.log(1 - 0.25), abs=1e-12)
    assert val == pytest.approx(0.1438, abs=1e-4)


def test_single_component_matches_closed_form_grid():
    R = np.array([[1.0, -0.7], [-0.7, 1.0]])
    g = np.linspace(0.005, 0.995, 10)
    v = np.array([(a, b) for a in g for b in g])
    err = np.abs(gmcm_log_density(v, GmcmParams.gaussian(R)) - gaussian_copula_logpdf(v, R))
    assert err.max() < 1e-6


def test_invariance_to_marginal_affine_maps():
    # the copula of a mixture does not change under coordinate-wise location/scale maps
    rng = np.random.default_rng(4)
    par = random_params(rng, 2, 2)
    a, b = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    moved = GmcmParams(par.weights, par.means * b + a, par.covs * np.outer(b, b)[None], "full")
    v = rng.uniform(size=(20, 2))
    np.testing.assert_allclose(gmcm_log_density(v, moved), gmcm_log_density(v, par), atol=1e-9)


def test_mixture_quantile_inverts_cdf():
    rng = np.random.default_rng(5)
    par = random_params(rng, 3, 2)
    sd = np.sqrt(np.diagonal(par.covs, axis1=1, axis2=2))
    v = np.vstack([rng.uniform(size=(200, 2)), [[1e-10, 1 - 1e-10]]])
    x = mixture_quantile(v, par.weights, par.means, sd)
    assert np.max(np.abs(mixture_cdf(x, par.weights, par.means, sd) - v)) < 1e-12


@pytest.mark.parametrize("n,G", [(2, 1), (2, 2), (3, 1), (3, 2)])
def test_monte_carlo_normalisation(n, G):
    rng = np.random.default_rng(10 * n + G)
    par = random_params(rng, G, n)
    c = np.exp(gmcm_log_density(rng.uniform(size=(200_000, n)), par))
    assert abs(c.mean() - 1) < 3 * c.std(ddof=1) / np.sqrt(c.size)


def test_sampler_reproduces_density():
    # draws from sample_copula have log-density averages matching a direct integral
    rng = np.random.default_rng(6)
    par = random_params(rng, 2, 2)
    v = sample_copula(par, 100_000, rng)
    assert stats.kstest(v[:, 0], "uniform").pvalue > 0.001
    assert stats.kstest(v[:, 1], "uniform").pvalue > 0.001
    u = rng.uniform(size=(400_000, 2))
    c = np.exp(gmcm_log_density(u, par))
    lc = np.log(c)
    # E_c[log c] estimated two ways
    direct = np.mean(c * lc)
    se = np.sqrt(np.var(c * lc) / u.shape[0] + np.var(gmcm_log_density(v, par)) / v.shape[0])
    assert abs(gmcm_log_density(v, par).mean() - direct) < 4 * se


def test_sklar_additivity_against_multivariate_normal():
    rng = np.random.default_rng(7)
    R = np.array([[1.0, 0.4, -0.2], [0.4, 1.0, 0.3], [-0.2, 0.3, 1.0]])
    loc = rng.normal(size=(40, 3))
    scale = rng.uniform(0.5, 2.0, size=3)
    y = loc + (rng.standard_normal((40, 3)) @ np.linalg.cholesky(R).T) * scale
    marg, v = gaussian_marginals(y, loc, scale)
    dec = system_log_likelihood(marg, v, GmcmParams.gaussian(R))
    cov = R * np.outer(scale, scale)
    oracle = sum(stats.multivariate_normal(loc[t], cov).logpdf(y[t]) for t in range(40))
    assert dec.total == pytest.approx(oracle, rel=1e-8, abs=1e-8)
    assert dec.total == pytest.approx(dec.marginal.sum() + dec.copula.sum(), abs=1e-8)


def test_params_validation():
    with pytest.raises(ValueError):
        GmcmParams([0.6, 0.4], np.zeros((2, 2)), np.array([np.eye(2)] * 2))
    with pytest.raises(ValueError):
        GmcmParams([0.4, 0.6], np.zeros((2, 2)), np.array([np.eye(2), -np.eye(2)]))
    with pytest.raises(ValueError):
        GmcmParams([0.5, 0.6], np.zeros((2, 2)), np.array([np.eye(2)] * 2))


# --- S1 / S2 ---------------------------------------------------------------

def test_s1_examples():
    Om1 = np.array([[1.0, 0.3], [0.3, 1.0]])
    out = expand_s1(S1Params(Om1, [0.0], [[0.2, 0.4]]))
    np.testing.assert_array_equal(out[1], np.diag([0.2, 0.4]))
    out = expand_s1(S1Params(Om1, [1.0, 1.0], np.zeros((2, 2))))
    for Om in out:
        np.testing.assert_array_equal(Om, Om1)
    out = expand_s1(S1Params(np.eye(3), [0.5], [[0.5] * 3]))
    np.testing.assert_array_equal(out[1], np.eye(3))


def test_s2_examples():
    Om1 = np.eye(4)
    tiny = expand_s2(S2Params(Om1, [1e-9], [[0.3, 0.4, 0.5, 0.6]], (7,), 2))
    np.testing.assert_allclose(tiny[1], np.diag([0.3, 0.4, 0.5, 0.6]), atol=1e-15)
    a = expand_s2(S2Params(Om1, [0.7], [[1.0] * 4], (99,), 2))
    b = expand_s2(S2Params(Om1, [0.7], [[1.0] * 4], (99,), 2))
    assert np.array_equal(a[1], b[1])
    # k = n with orthogonal loadings and D = 0 gives scale^2 I
    from tvpcopula import copula as cmod
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    orig = cmod.s2_loadings
    cmod.s2_loadings = lambda seed, n, k: Q
    try:
        out = expand_s2(S2Params(Om1, [1.5], [[0.0] * 4], (1,), 4))
    finally:
        cmod.s2_loadings = orig
    np.testing.assert_allclose(out[1], 2.25 * np.eye(4), atol=1e-12)
    with pytest.raises(ValueError):
        expand_s2(S2Params(Om1, [1.0], [[0.0] * 4], (3,), 1))


@pytest.mark.parametrize("rep", ["S1", "S2"])
def test_parameter_count_identity(rep):
    for G in range(2, 6):
        for n in range(2, 31):
            par = Parameterization(rep, G, n, seeds=range(G - 1) if rep == "S2" else None)
            assert par.sizes[3] == (G - 1) * (n + 1)
            assert covariance_param_count(rep, G, n) == (G - 1) * (n + 1)
    s1 = S1Params(np.eye(5), np.ones(3), np.ones((3, 5)))
    assert s1.free_param_count == 3 * 6
    s2 = S2Params(np.eye(5), np.ones(3), np.ones((3, 5)), (1, 2, 3), 2)
    assert s2.free_param_count == 3 * 6


# --- coordinates and gradient ---------------------------------------------

@pytest.mark.parametrize("rep", ["full", "S1", "S2"])
def test_roundtrip_coordinates(rep):
    rng = np.random.default_rng(8)
    par = Parameterization(rep, 3, 3, seeds=(5, 6) if rep == "S2" else None)
    th = 0.4 * rng.standard_normal(par.dim)
    params = par.to_params(th)
    assert np.all(np.diff(params.weights) > 0)
    np.testing.assert_allclose(np.diag(params.covs[0]), 1.0, atol=1e-14)
    np.testing.assert_allclose(par.from_params(params), th, atol=1e-10)


@pytest.mark.parametrize("rep", ["full", "S1", "S2"])
def test_copula_gradient_matches_finite_differences(rep):
    rng = np.random.default_rng(9)
    pits = PitPanel(rng.uniform(size=(60, 2)))
    par = Parameterization(rep, 2, 2, seeds=(17,) if rep == "S2" else None)
    th = 0.3 * rng.standard_normal(par.dim)
    for jac in (False, True):
        rep_ = fisher_gradient_check(copula_target(pits, par, jac), th, 1e-6)
        assert rep_.max_rel_error < 1e-5


def test_cholesky_backprop_matches_finite_differences():
    rng = np.random.default_rng(31)
    A = rng.standard_normal((3, 3))
    Om = A @ A.T + np.eye(3)
    prior = CopulaPrior(chol_center=rng.standard_normal((2, 6)))
    covs = np.array([np.eye(3), Om])
    p, mu = np.array([0.4, 0.6]), np.zeros((2, 3))
    _, (_, _, g_cov) = copula_log_prior(prior, p, mu, covs)
    E = rng.standard_normal((3, 3))
    E = E + E.T
    eps = 1e-6
    up = copula_log_prior(prior, p, mu, np.array([np.eye(3), Om + eps * E]))[0]
    dn = copula_log_prior(prior, p, mu, np.array([np.eye(3), Om - eps * E]))[0]
    assert abs((up - dn) / (2 * eps) - np.sum(g_cov[1] * E)) < 1e-6


@pytest.mark.parametrize("rep", ["full", "S1", "S2"])
def test_gradient_with_prior_matches_finite_differences(rep):
    rng = np.random.default_rng(32)
    pits = PitPanel(rng.uniform(size=(40, 2)))
    par = Parameterization(rep, 2, 2, seeds=(17,) if rep == "S2" else None)
    prior = CopulaPrior(log_weight_center=np.log([0.3, 0.7]), mean_center=rng.standard_normal((2, 2)),
                        chol_center=rng.standard_normal((2, 3)), weight_var=2.0, mean_var=1.0, chol_var=3.0)
    th = 0.3 * rng.standard_normal(par.dim)
    target = copula_target(pits, par, True, prior=prior)
    assert fisher_gradient_check(target, th, 1e-6).max_rel_error < 1e-5
    flat = copula_target(pits, par, True).value_and_grad(th)[0]
    assert target.value_and_grad(th)[0] < flat


def test_warm_start_skips_mode_search():
    rng = np.random.default_rng(33)
    start = GmcmParams([0.3, 0.7], [[0, 0], [1.0, -0.5]], [[[1, 0.3], [0.3, 1]], [[0.6, 0.1], [0.1, 0.8]]])
    pits = PitPanel(sample_copula(start, 300, rng))
    fit = fit_copula(pits, 2, "full", rng, CopulaFitConfig(burn_in=0, iterations=5), init=start)
    assert np.isnan(fit.log_marginal_likelihood)
    np.testing.assert_allclose(fit.mode, fit.parameterization.from_params(start))
    with pytest.raises(ValueError):
        fit_copula(pits, 3, "full", rng, CopulaFitConfig(burn_in=0, iterations=5), init=start)


def test_json_roundtrip_bit_exact():
    rng = np.random.default_rng(11)
    for rep, seeds in (("full", None), ("S1", None), ("S2", (123456789, 987654321))):
        par = Parameterization(rep, 3, 3, seeds=seeds)
        params = par.to_params(rng.standard_normal(par.dim) * 0.5)
        back = GmcmParams.from_json(params.to_json())
        assert back.representation == rep
        for a, b in ((params.weights, back.weights), (params.means, back.means), (params.covs, back.covs)):
            assert np.array_equal(a, b)
        if rep == "S2":
            assert back.structure.seeds == seeds
            assert np.array_equal(np.array(expand_s2(back.structure)), back.covs)
        json.loads(params.to_json())


# --- fitting ---------------------------------------------------------------

@pytest.mark.slow
def test_fit_gaussian_copula_recovers_rho():
    rng = np.random.default_rng(12)
    R = np.array([[1.0, 0.6], [0.6, 1.0]])
    pits = PitPanel(sample_copula(GmcmParams.gaussian(R), 2000, rng))
    fit = fit_copula(pits, 1, "full", rng, CopulaFitConfig(burn_in=500, iterations=1500))
    assert abs(fit.params.covs[0, 0, 1] - 0.6) < 0.05
    assert 0.15 < fit.chain.acceptance_rate < 0.45


@pytest.mark.slow
def test_fit_two_component_mixture_recovers_means():
    rng = np.random.default_rng(13)
    true = GmcmParams([0.4, 0.6], [[0, 0], [3, 3]], [[[1, 0.5], [0.5, 1]], [[0.5, 0], [0, 0.5]]])
    pits = PitPanel(sample_copula(true, 1000, rng))
    fit = fit_copula(pits, 2, "full", rng, CopulaFitConfig(burn_in=1000, iterations=2000))
    mus = np.array([d.means for d in fit.draws()])
    sd = mus.std(0)[1]
    assert np.all(np.abs(fit.params.means[1] - true.means[1]) < 3 * sd)
    assert np.all(np.diff(fit.params.weights) > 0)


def test_fit_requires_enough_observations():
    pits = PitPanel(np.random.default_rng(0).uniform(size=(5, 3)))
    with pytest.raises(ValueError, match="cannot identify"):
        fit_mode(pits, 2, "full", np.random.default_rng(0))


def test_structured_fit_counts():
    rng = np.random.default_rng(14)
    pits = PitPanel(sample_copula(random_params(rng, 2, 3), 300, rng))
    fit = fit_copula(pits, 2, "S1", rng, CopulaFitConfig(burn_in=100, iterations=100))
    assert fit.params.structure.free_param_count == (2 - 1) * (3 + 1)
    assert fit.params.representation == "S1"


def test_select_G_examples():
    rng = np.random.default_rng(15)
    indep = PitPanel(rng.uniform(size=(500, 3)))
    G, scores = select_G(indep, [1, 2, 3], rng=rng)
    assert G == 1 and set(scores) == {1, 2, 3}
    assert select_G(indep, [2], rng=rng)[0] == 2
    true = GmcmParams([0.4, 0.6], [[0, 0], [3, 3]], [[[1, 0.5], [0.5, 1]], [[0.5, 0], [0, 0.5]]])
    bimodal = PitPanel(sample_copula(true, 1000, rng))
    _, scores = select_G(bimodal, [1, 2], rng=rng)
    assert scores[2] > scores[1]
    with pytest.raises(ValueError):
        select_G(indep, [])


def test_s2_seed_search_deterministic_and_tie_break():
    rng = np.random.default_rng(16)
    pits = PitPanel(sample_copula(random_params(rng, 2, 3), 200, rng))
    a = search_s2_seeds(pits, 2, 42, 4, n_starts=1)
    b = search_s2_seeds(pits, 2, 42, 4, n_starts=1)
    assert a == b
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(2) as ex:
        c = search_s2_seeds(pits, 2, 42, 4, executor=ex, n_starts=1)
    assert a == c
