import numpy as np
import pytest
from scipy import stats

from tvpcopula.sv import (
    KSC_TABLE,
    MixtureTable,
    SvParams,
    SvPrior,
    linearize,
    sample_indicators,
    sample_sv_params,
    sample_volpath,
)

import joint_check
from oracles import dense_posterior, ln_chi2_1_moments


def test_table_moments_match_log_chi2():
    ref_mean, ref_var = ln_chi2_1_moments()
    assert abs(ref_mean - (-1.2704)) < 1e-3
    mean, var = KSC_TABLE.moments()
    assert abs(mean - ref_mean) < 0.05
    assert abs(var - ref_var) < 0.05
    assert abs(KSC_TABLE.probs.sum() - 1.0) < 1e-12
    assert len(KSC_TABLE.probs) == 7


def test_linearize():
    assert linearize([1.0], 0.0)[0] == 0.0
    assert np.isclose(linearize([0.0], 1e-6)[0], np.log(1e-6))
    np.testing.assert_allclose(linearize([1.0, np.e], 0.0), [0.0, 2.0])
    assert np.isfinite(linearize(np.zeros(4))).all()


def _exact_probs(d, table):
    w = table.probs * stats.norm(table.means, np.sqrt(table.variances)).pdf(d)
    return w / w.sum()


def test_indicators_dominant_component():
    probs = np.full(7, 1e-12 / 6)
    probs[3] = 1 - 1e-12
    table = MixtureTable(probs, KSC_TABLE.means, KSC_TABLE.variances)
    s = sample_indicators(np.zeros(50), np.zeros(50), table, np.random.default_rng(0))
    assert np.all(s == 3)


def test_indicators_far_separated_component():
    table = MixtureTable(np.full(7, 1 / 7), np.arange(7) * 100.0, np.full(7, 1.0))
    j = 4
    s = sample_indicators(np.full(10_000, 400.0), np.zeros(10_000), table, np.random.default_rng(1))
    assert np.isclose(_exact_probs(400.0, table)[j], 1.0)
    assert np.mean(s == j) > 0.999


def test_indicators_reproducible():
    y = np.random.default_rng(2).normal(size=30)
    a = sample_indicators(y, np.zeros(30), KSC_TABLE, np.random.default_rng(5))
    b = sample_indicators(y, np.zeros(30), KSC_TABLE, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_indicator_chi2_goodness_of_fit():
    d = -1.0
    n = 100_000
    s = sample_indicators(np.full(n, d), np.zeros(n), KSC_TABLE, np.random.default_rng(3))
    expected = _exact_probs(d, KSC_TABLE) * n
    observed = np.bincount(s, minlength=7).astype(float)
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] < 5:
        obs[-2] += obs[-1]
        exp[-2] += exp[-1]
        obs, exp = obs[:-1], exp[:-1]
    assert stats.chisquare(obs, exp).pvalue > 0.001


def test_volpath_degenerate_noise_is_constant():
    params = SvParams(alpha=0.3, gamma=0.0, delta=1e-14)
    ystar = np.random.default_rng(0).normal(size=20)
    s = np.full(20, 4)
    h = sample_volpath(ystar, s, params, np.random.default_rng(1))
    np.testing.assert_allclose(h[1:], 0.3, atol=1e-5)


def test_volpath_seed_determinism():
    params = SvParams(0.1, 0.8, 0.1)
    ystar = np.random.default_rng(0).normal(size=15)
    s = np.random.default_rng(1).integers(0, 7, 15)
    a = sample_volpath(ystar, s, params, np.random.default_rng(9))
    b = sample_volpath(ystar, s, params, np.random.default_rng(9))
    assert np.array_equal(a, b)


@pytest.mark.slow
def test_volpath_moments_match_dense_oracle():
    params = SvParams(0.2, 0.7, 0.3)
    prior = SvPrior(h0_mean=0.5, h0_var=2.0)
    ystar = np.array([-1.0, 0.5, -2.0])
    s = np.array([4, 6, 1])
    T = 3
    # dense oracle on the untransformed state h with an intercept folded into the mean
    A = np.full((T, 1, 1), params.gamma)
    Q = np.full((T, 1, 1), params.delta)
    Z = np.ones((T, 1, 1))
    R = KSC_TABLE.variances[s][:, None, None]
    d = np.array([0.5, 0.2 + 0.7 * 0.5, 0.2 + 0.7 * (0.2 + 0.35)])
    y = ystar - KSC_TABLE.means[s] - d
    mean, cov = dense_posterior(y[:, None], A, Q, Z, R, np.zeros(1), np.array([[2.0]]))
    mean = mean + d
    n = 50_000
    rng = np.random.default_rng(4)
    draws = np.array([sample_volpath(ystar, s, params, rng, prior=prior) for _ in range(n)])
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05, atol=0.01)


def test_sv_params_noiseless_ar1():
    h = np.empty(200)
    h[0] = 1.0
    for t in range(1, 200):
        h[t] = 0.1 + 0.5 * h[t - 1]
    h += 1e-9 * np.random.default_rng(0).normal(size=200)
    p = sample_sv_params(h, np.random.default_rng(1), current=SvParams(0.0, 0.0, 1e-8))
    assert p.delta < 1e-12 * 100
    assert abs(p.alpha - 0.1) < 1e-4 and abs(p.gamma - 0.5) < 1e-4


def test_sv_params_recovers_truth():
    rng = np.random.default_rng(5)
    T = 2000
    h = np.zeros(T)
    for t in range(1, T):
        h[t] = 0.0 + 0.9 * h[t - 1] + rng.normal(0, 0.2)
    draws = []
    cur = None
    for _ in range(3000):
        cur = sample_sv_params(h, rng, current=cur)
        draws.append((cur.alpha, cur.gamma, cur.delta))
    draws = np.array(draws[500:])
    truth = np.array([0.0, 0.9, 0.04])
    assert np.all(np.abs(draws.mean(0) - truth) < 3 * draws.std(0))


def test_stationarity_restriction_enforced():
    # explosive path: unrestricted posterior mass sits above one
    h = 1.003 ** np.arange(60) + 0.3 * np.random.default_rng(2).normal(size=60).cumsum()
    rng = np.random.default_rng(3)
    cur = SvParams(0.0, 0.99, 1e-3)
    for _ in range(200):
        cur = sample_sv_params(h, rng, current=cur, prior=SvPrior(stationary=True, max_rejections=100_000))
        assert abs(cur.gamma) < 1.0


def test_degenerate_path_raises_after_bounded_rejections():
    h = 1.5 ** np.arange(30)
    with pytest.raises(RuntimeError):
        sample_sv_params(h, np.random.default_rng(0), current=SvParams(0, 0, 1e-10),
                         prior=SvPrior(max_rejections=10))


@pytest.mark.slow
def test_gibbs_recovers_volatility_path():
    rng = np.random.default_rng(11)
    T = 1500
    truth = SvParams(0.0, 0.98, 0.05)
    h = np.zeros(T)
    h[0] = rng.normal(0.0, 1.0)
    for t in range(1, T):
        h[t] = truth.alpha + truth.gamma * h[t - 1] + rng.normal(0, np.sqrt(truth.delta))
    y = np.exp(h / 2) * rng.normal(size=T)
    ystar = linearize(y)
    params = SvParams(0.0, 0.5, 0.2)
    hcur = ystar - KSC_TABLE.moments()[0]
    acc = np.zeros(T)
    keep = 0
    for it in range(1500):
        s = sample_indicators(ystar, hcur, KSC_TABLE, rng)
        hcur = sample_volpath(ystar, s, params, rng)
        params = sample_sv_params(hcur, rng, current=params)
        if it >= 500:
            acc += hcur
            keep += 1
    assert np.corrcoef(acc / keep, h)[0, 1] > 0.8


@pytest.mark.slow
def test_volatility_block_joint_distribution():
    # on the linearised scale the mixture is the exact error law, so the
    # indicator / path / parameter sweep must reproduce the prior
    res = joint_check.sv_joint_check(30, 10_000, 10_000, np.random.default_rng(31))
    assert np.all(res.pvalues > 0.001), dict(zip(res.names, res.pvalues))
