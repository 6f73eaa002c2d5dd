"""Stochastic-volatility block.

The log-variance follows ``h_t = alpha + gamma * h_{t-1} + e_t`` with
``e_t ~ N(0, delta)``. Squared residuals are linearised as
``log(u_t^2) = h_t + log(u*_t^2)`` and the law of ``log(chi2_1)`` is replaced by
a seven-component normal mixture, which makes the model conditionally
Gaussian in ``h`` given the component indicators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .kalman import LinearGaussianSSM, simulation_smoother


@dataclass(frozen=True)
class SvParams:
    alpha: float
    gamma: float
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class MixtureTable:
    probs: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (7,) or np.shape(self.means) != (7,) or np.shape(self.variances) != (7,):
            raise ValueError("mixture table must have exactly 7 components")
        if abs(probs.sum() - 1.0) > 1e-4:
            raise ValueError("mixture probabilities do not sum to one")
        object.__setattr__(self, "probs", probs / probs.sum())
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float))

    def moments(self) -> tuple[float, float]:
        mean = float(self.probs @ self.means)
        second = float(self.probs @ (self.variances + self.means ** 2))
        return mean, second - mean ** 2

    def logpdf(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)[..., None]
        comp = -0.5 * (np.log(2 * np.pi * self.variances) + (z - self.means) ** 2 / self.variances)
        return logsumexp(comp + np.log(self.probs), axis=-1)


# Seven-component table with means shifted by -1.2704 so the mixture
# targets log(chi2_1) itself.
KSC_TABLE = MixtureTable(
    probs=np.array([0.00730, 0.10556, 0.00002, 0.04395, 0.34001, 0.24566, 0.25750]),
    means=np.array([-10.12999, -3.97281, -8.56686, 2.77786, 0.61942, 1.79518, -1.08819]) - 1.2704,
    variances=np.array([5.79596, 2.61369, 5.17950, 0.16735, 0.64009, 0.34023, 1.26261]),
)


@dataclass(frozen=True)
class SvPrior:
    """Prior for (alpha, gamma, delta) and the initial log-variance.

    ``coef_mean``/``coef_cov`` of None means a flat prior on (alpha, gamma).
    ``delta`` has an inverse-gamma kernel ``delta^-(shape+1) exp(-scale/delta)``;
    the default ``shape=-1, scale=0`` is the flat prior on ``delta > 0``.
    """

    coef_mean: np.ndarray | None = None
    coef_cov: np.ndarray | None = None
    delta_shape: float = -1.0
    delta_scale: float = 0.0
    stationary: bool = True
    nonnegative: bool = False
    h0_mean: float = 0.0
    h0_var: float = 10.0
    max_rejections: int = 1000


def linearize(residuals, offset: float | None = None) -> np.ndarray:
    """``log(residual^2 + offset)``; the default offset is 1e-6 times the residual variance."""
    r = np.asarray(residuals, dtype=float)
    if offset is None:
        offset = 1e-6 * float(np.var(r)) if r.size > 1 else 0.0
        if offset == 0.0:
            offset = 1e-12
    with np.errstate(divide="ignore"):
        return np.log(r * r + offset)


def indicator_log_probs(ystar, h, table: MixtureTable = KSC_TABLE) -> np.ndarray:
    """Normalised log-probabilities of each mixture component, shape (T, 7)."""
    d = (np.asarray(ystar) - np.asarray(h))[:, None]
    lw = np.log(table.probs) - 0.5 * (np.log(table.variances) + (d - table.means) ** 2 / table.variances)
    return lw - logsumexp(lw, axis=1, keepdims=True)


def sample_indicators(ystar, h, table: MixtureTable, rng: np.random.Generator) -> np.ndarray:
    """Draw each indicator from its exact conditional categorical distribution."""
    cdf = np.cumsum(np.exp(indicator_log_probs(ystar, h, table)), axis=1)
    u = rng.random(cdf.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[1] - 1)


def sample_volpath(ystar, indicators, params: SvParams, rng: np.random.Generator,
                   table: MixtureTable = KSC_TABLE, prior: SvPrior = SvPrior()) -> np.ndarray:
    """Joint draw of the log-variance path given mixture indicators.

    The intercept is handled by subtracting the deterministic mean path
    ``d_t = alpha + gamma * d_{t-1}``; the residual state is then a zero-mean AR(1).
    """
    ystar = np.asarray(ystar, dtype=float)
    s = np.asarray(indicators)
    T = ystar.shape[0]
    d = np.empty(T)
    d[0] = prior.h0_mean
    for t in range(1, T):
        d[t] = params.alpha + params.gamma * d[t - 1]
    obs = (ystar - table.means[s] - d)[:, None]
    model = LinearGaussianSSM(
        transition=np.array([[params.gamma]]),
        state_cov=np.array([[params.delta]]),
        loading=np.ones((1, 1)),
        obs_cov=table.variances[s][:, None, None],
        init_mean=np.zeros(1),
        init_cov=np.array([[prior.h0_var]]),
    )
    return simulation_smoother(model, obs, rng)[:, 0] + d


def _admissible(coef, prior: SvPrior) -> bool:
    if prior.stationary and not abs(coef[1]) < 1.0:
        return False
    if prior.nonnegative and np.any(coef < 0.0):
        return False
    return True


def sample_sv_params(h, rng: np.random.Generator, current: SvParams | None = None,
                     prior: SvPrior = SvPrior()) -> SvParams:
    """Gibbs update of (alpha, gamma) | delta, then delta | (alpha, gamma).

    Restricted coefficient draws are rejected and redrawn, which samples the
    truncated conditional exactly.
    """
    h = np.asarray(h, dtype=float)
    if h.shape[0] < 3:
        raise ValueError("need at least 3 log-variance values")
    y = h[1:]
    X = np.column_stack([np.ones(len(y)), h[:-1]])
    delta = current.delta if current is not None else max(float(np.var(np.diff(h))), 1e-6)

    XtX = X.T @ X
    Xty = X.T @ y
    prec = XtX / delta
    lin = Xty / delta
    if prior.coef_cov is not None:
        prior_prec = np.linalg.inv(prior.coef_cov)
        prec = prec + prior_prec
        lin = lin + prior_prec @ np.asarray(prior.coef_mean, dtype=float)
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, lin)
    for _ in range(prior.max_rejections):
        coef = mean + np.linalg.solve(L.T, rng.standard_normal(2))
        if _admissible(coef, prior):
            break
    else:
        raise RuntimeError(
            f"no admissible SV coefficient draw in {prior.max_rejections} tries "
            f"(posterior mean {mean}); the log-variance path is degenerate"
        )
    resid = y - X @ coef
    shape = prior.delta_shape + 0.5 * len(y)
    scale = prior.delta_scale + 0.5 * float(resid @ resid)
    if shape <= 0:
        raise ValueError("delta posterior is improper; need more observations")
    delta = scale / rng.gamma(shape)
    return SvParams(float(coef[0]), float(coef[1]), max(delta, 1e-12))
