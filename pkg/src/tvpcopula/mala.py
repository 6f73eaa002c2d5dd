"""Metropolis-adjusted Langevin sampling and particle-filter score estimates.

The sampler works on an unconstrained parameter vector; targets are callables
returning ``(log density, gradient)``. Gradients may be exact or come from
:func:`rb_gradient`, a Rao-Blackwellised particle estimate of the score of a
state-space likelihood.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration and targets

@dataclass(frozen=True)
class MalaConfig:
    """Step size and adaptation settings.

    ``lam`` scales the proposal ``N(theta + lam^2/2 grad, lam^2 I)``. During
    burn-in, every ``adapt_every`` steps log(lam) moves by a Robbins-Monro
    step toward the acceptance band; retained draws use the frozen value.
    """

    lam: float = 0.5
    target_acceptance: tuple = (0.25, 0.30)
    burn_in: int = 1000
    iterations: int = 5000
    adapt: bool = True
    adapt_every: int = 50
    adapt_gain: float = 1.0
    adapt_decay: float = 0.6

    def __post_init__(self):
        lo, hi = self.target_acceptance
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 < lo <= hi < 1:
            raise ValueError("target_acceptance must be an interval inside (0, 1)")
        if self.burn_in < 0 or self.iterations < 1:
            raise ValueError("burn_in must be >= 0 and iterations >= 1")
        if self.adapt_every < 1:
            raise ValueError("adapt_every must be positive")


@dataclass(frozen=True)
class TargetSpec:
    """Log density on R^d.

    Attributes:
        value_and_grad: theta -> (log p, grad log p). Non-finite log p marks
            an infeasible point.
        dim: parameter dimension.
        hessian: optional theta -> metric G(theta) (negative Hessian or Fisher
            information) for the preconditioned step.
    """

    value_and_grad: Callable
    dim: int
    hessian: Callable | None = None

    @classmethod
    def from_functions(cls, log_density, gradient, dim, hessian=None) -> "TargetSpec":
        return cls(lambda th: (log_density(th), gradient(th)), dim, hessian)


@dataclass(frozen=True)
class ChainPoint:
    theta: np.ndarray
    log_density: float
    grad: np.ndarray


class NonFiniteGradient(FloatingPointError):
    pass


def evaluate(target: TargetSpec, theta) -> ChainPoint:
    theta = np.asarray(theta, dtype=float)
    lp, g = target.value_and_grad(theta)
    return ChainPoint(theta, float(lp), np.asarray(g, dtype=float))


def _as_point(current, target) -> ChainPoint:
    return current if isinstance(current, ChainPoint) else evaluate(target, current)


# ---------------------------------------------------------------------------
# steps

def _langevin_logq(to, frm: ChainPoint, lam):
    mean = frm.theta + 0.5 * lam ** 2 * frm.grad
    return -0.5 * np.sum((to - mean) ** 2) / lam ** 2


def mala_step(current, target: TargetSpec, lam: float, rng: np.random.Generator):
    """One Langevin proposal with Metropolis-Hastings correction.

    Args:
        current: ChainPoint (preferred, avoids re-evaluating) or a raw vector.

    Returns:
        (ChainPoint, accepted). An infeasible proposal is rejected.

    Raises:
        NonFiniteGradient: the gradient at the current point is not finite.
    """
    cur = _as_point(current, target)
    if not np.isfinite(cur.log_density):
        raise ValueError("log density at the current point is not finite")
    if not np.all(np.isfinite(cur.grad)):
        raise NonFiniteGradient("gradient at the current point is not finite")
    prop_theta = cur.theta + 0.5 * lam ** 2 * cur.grad + lam * rng.standard_normal(cur.theta.shape)
    u = rng.uniform()
    prop = evaluate(target, prop_theta)
    if not (np.isfinite(prop.log_density) and np.all(np.isfinite(prop.grad))):
        return cur, False
    log_alpha = (prop.log_density - cur.log_density
                 + _langevin_logq(cur.theta, prop, lam) - _langevin_logq(prop.theta, cur, lam))
    if np.log(u) < log_alpha:
        return prop, True
    return cur, False


def floored_metric(G, floor: float = 1e-8):
    """Symmetrise G and raise its eigenvalues to at least ``floor`` times the largest."""
    G = 0.5 * (np.asarray(G, dtype=float) + np.asarray(G, dtype=float).T)
    w, v = np.linalg.eigh(G)
    if not np.all(np.isfinite(w)) or w.max() <= 0:
        raise np.linalg.LinAlgError("metric has no positive eigenvalue")
    w = np.maximum(w, floor * w.max())
    return w, v


def _precond_logq(to, frm, w, v, eps):
    # N(frm, eps^2 G^-1) with G = v diag(w) v'
    d = v.T @ (to - frm)
    return -0.5 * np.sum(w * d ** 2) / eps ** 2 + 0.5 * np.sum(np.log(w)) - d.size * np.log(eps)


def precond_mala_step(current, target: TargetSpec, epsilon: float, rng: np.random.Generator,
                      floor: float = 1e-8):
    """Position-dependent Gaussian proposal ``N(theta, eps^2 G(theta)^-1)``.

    Indefinite metrics are repaired by eigenvalue flooring. The MH ratio
    includes both proposal densities since the covariance moves with theta.
    """
    if target.hessian is None:
        raise ValueError("target has no metric")
    cur = _as_point(current, target)
    w, v = floored_metric(target.hessian(cur.theta), floor)
    z = rng.standard_normal(cur.theta.shape)
    prop_theta = cur.theta + epsilon * (v @ (z / np.sqrt(w)))
    u = rng.uniform()
    prop = evaluate(target, prop_theta)
    if not np.isfinite(prop.log_density):
        return cur, False
    try:
        w2, v2 = floored_metric(target.hessian(prop.theta), floor)
    except np.linalg.LinAlgError:
        return cur, False
    log_alpha = (prop.log_density - cur.log_density
                 + _precond_logq(cur.theta, prop.theta, w2, v2, epsilon)
                 - _precond_logq(prop.theta, cur.theta, w, v, epsilon))
    if np.log(u) < log_alpha:
        return prop, True
    return cur, False


def adapt_lambda(acceptances, lam: float, config: MalaConfig, round_index: int = 0) -> float:
    """Robbins-Monro update of log(lam) from the last ``adapt_every`` acceptances.

    No change inside the target band or with fewer than 50 recorded steps.
    """
    acc = np.asarray(acceptances, dtype=float)
    if acc.size < 50:
        return lam
    rate = acc[-config.adapt_every:].mean() if acc.size >= config.adapt_every else acc.mean()
    lo, hi = config.target_acceptance
    if lo <= rate <= hi:
        return lam
    gain = config.adapt_gain / (round_index + 1) ** config.adapt_decay
    return float(lam * np.exp(gain * (rate - 0.5 * (lo + hi))))


# ---------------------------------------------------------------------------
# chains

@dataclass
class MalaChain:
    draws: np.ndarray  # (retained, d)
    log_density: np.ndarray
    accepted: np.ndarray  # (burn_in + retained,) bool
    lambdas: np.ndarray  # step size in force at each iteration
    burn_in: int

    @property
    def acceptance_rate(self) -> float:
        """Acceptance over the retained (post-adaptation) iterations."""
        return float(self.accepted[self.burn_in:].mean())

    def ess(self) -> np.ndarray:
        return np.array([effective_sample_size(self.draws[:, j]) for j in range(self.draws.shape[1])])

    def write_diagnostics(self, path) -> None:
        """Per-iteration acceptance and step size, then one ESS row per coordinate."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "phase", "accepted", "lambda", "log_density"])
            lp_full = np.concatenate([np.full(self.burn_in, np.nan), self.log_density])
            for i, (a, lam) in enumerate(zip(self.accepted, self.lambdas)):
                w.writerow([i, "burn_in" if i < self.burn_in else "retained", int(a), repr(float(lam)),
                            "" if np.isnan(lp_full[i]) else repr(float(lp_full[i]))])
        with path.with_name(path.stem + "_ess.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coordinate", "ess", "mean", "sd"])
            for j, e in enumerate(self.ess()):
                col = self.draws[:, j]
                w.writerow([j, repr(float(e)), repr(float(col.mean())), repr(float(col.std(ddof=1)))])


def run_mala(target: TargetSpec, theta0, config: MalaConfig, rng: np.random.Generator,
             step: str = "mala", epsilon: float | None = None) -> MalaChain:
    """Run burn-in (with step-size adaptation) and ``config.iterations`` retained steps.

    ``step="precond"`` uses the metric proposal with scale ``epsilon``
    (defaults to ``config.lam``); adaptation then acts on epsilon.
    """
    point = evaluate(target, theta0)
    if not np.isfinite(point.log_density):
        raise ValueError("initial point has non-finite log density")
    lam = config.lam if step == "mala" or epsilon is None else epsilon
    n_total = config.burn_in + config.iterations
    draws = np.empty((config.iterations, target.dim))
    lps = np.empty(config.iterations)
    accepted = np.zeros(n_total, dtype=bool)
    lambdas = np.empty(n_total)
    rounds = 0
    for it in range(n_total):
        lambdas[it] = lam
        if step == "mala":
            point, acc = mala_step(point, target, lam, rng)
        elif step == "precond":
            point, acc = precond_mala_step(point, target, lam, rng)
        else:
            raise ValueError(f"unknown step type {step!r}")
        accepted[it] = acc
        if it < config.burn_in:
            if config.adapt and (it + 1) % config.adapt_every == 0:
                lam = adapt_lambda(accepted[:it + 1], lam, config, rounds)
                rounds += 1
        else:
            draws[it - config.burn_in] = point.theta
            lps[it - config.burn_in] = point.log_density
    return MalaChain(draws, lps, accepted, lambdas, config.burn_in)


def effective_sample_size(x) -> float:
    """ESS from Geyer's initial monotone positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * np.var(x))
    pairs = acf[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        tau += 2.0 * g
        prev = g
    return float(n / max(tau, 1e-12))


# ---------------------------------------------------------------------------
# gradient checks

@dataclass(frozen=True)
class GradientCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max(initial=0.0))

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def fisher_gradient_check(target: TargetSpec, theta, step: float = 1e-5) -> GradientCheckReport:
    """Compare the analytic gradient with central finite differences.

    Relative error per coordinate is ``|a - n| / max(1, |n|)``.
    """
    theta = np.asarray(theta, dtype=float)
    _, g = target.value_and_grad(theta)
    g = np.asarray(g, dtype=float)
    num = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        num[j] = (target.value_and_grad(theta + e)[0] - target.value_and_grad(theta - e)[0]) / (2 * step)
    rel = np.abs(g - num) / np.maximum(1.0, np.abs(num))
    return GradientCheckReport(g, num, rel)


# ---------------------------------------------------------------------------
# Rao-Blackwellised particle score

class ParticleModel(Protocol):
    """State-space model for :func:`rb_gradient`; particles have shape (M, k)."""

    def sample_initial(self, M: int, rng: np.random.Generator) -> np.ndarray: ...

    def initial_score(self, particles: np.ndarray) -> np.ndarray: ...  # (M, d)

    def propagate(self, particles: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray: ...

    def transition_score(self, new: np.ndarray, old: np.ndarray, t: int) -> np.ndarray: ...

    def obs_logpdf(self, y_t, particles: np.ndarray, t: int) -> np.ndarray: ...

    def obs_score(self, y_t, particles: np.ndarray, t: int) -> np.ndarray: ...


@dataclass
class ParticleCloud:
    particles: np.ndarray
    weights: np.ndarray
    stats: np.ndarray  # m_t^(j), (M, d)
    zeta: float

    def __post_init__(self):
        if self.particles.shape[0] < 2:
            raise ValueError("need at least 2 particles")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        s = self.weights.sum()
        if not np.isclose(s, 1.0):
            raise ValueError("weights must sum to one")

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def estimate(self) -> np.ndarray:
        return self.weights @ self.stats


class WeightDegeneracy(RuntimeError):
    def __init__(self, t: int, ess: float):
        super().__init__(f"particle weights degenerate at t={t} (ESS {ess:.3g} < 2)")
        self.t = t
        self.ess = ess


@dataclass(frozen=True)
class RbResult:
    gradient: np.ndarray
    loglik: float
    ess: np.ndarray = field(repr=False)


def _normalise(logw):
    lse = logsumexp(logw)
    if not np.isfinite(lse):
        return None, lse
    return np.exp(logw - lse), lse


def rb_gradient(model: ParticleModel, obs, M: int, zeta: float, rng: np.random.Generator,
                aux_weights: Callable | None = None, adapted: bool = False) -> RbResult:
    """Particle estimate of the score of the log-likelihood, with shrinkage ``zeta``.

    Each particle carries a running score statistic; after resampling it is
    shrunk toward the weighted mean by ``zeta`` and incremented by the
    observation and transition scores. Particles propagate through the
    transition density. Auxiliary weights default to the previous normalised
    weights; ``aux_weights(cloud, y_t, t)`` may return log first-stage
    weights instead. ``adapted=True`` selects the fully adapted filter, which
    needs ``predictive_logpdf``, ``sample_adapted`` and ``transition_logpdf``
    on the model.

    Returns:
        RbResult with the score estimate, the particle log-likelihood
        estimate and the ESS after each period.

    Raises:
        WeightDegeneracy: if the ESS falls below 2.
    """
    obs = np.asarray(obs)
    T = obs.shape[0]
    parts = model.sample_initial(M, rng)
    logg = model.obs_logpdf(obs[0], parts, 0)
    w, lse = _normalise(logg)
    if w is None:
        raise WeightDegeneracy(0, 0.0)
    loglik = lse - np.log(M)
    stats = model.obs_score(obs[0], parts, 0) + model.initial_score(parts)
    cloud = ParticleCloud(parts, w, stats, zeta)
    ess = np.empty(T)
    ess[0] = cloud.ess
    if ess[0] < 2:
        raise WeightDegeneracy(0, ess[0])
    for t in range(1, T):
        log_xi = np.log(np.maximum(cloud.weights, 1e-300))
        if adapted:
            log_xi = log_xi + model.predictive_logpdf(obs[t], cloud.particles, t)
        elif aux_weights is not None:
            log_xi = np.asarray(aux_weights(cloud, obs[t], t), dtype=float)
        xi, _ = _normalise(log_xi)
        idx = rng.choice(M, size=M, p=xi)
        old = cloud.particles[idx]
        logw = np.log(np.maximum(cloud.weights[idx], 1e-300)) - np.log(xi[idx])
        if adapted:
            new, logq = model.sample_adapted(old, obs[t], t, rng)
            logg = model.obs_logpdf(obs[t], new, t)
            logw = logw + logg + model.transition_logpdf(new, old, t) - logq
        else:
            # bootstrap proposal: transition density cancels
            new = model.propagate(old, t, rng)
            logg = model.obs_logpdf(obs[t], new, t)
            logw = logw + logg
        w, lse = _normalise(logw)
        if w is None:
            raise WeightDegeneracy(t, 0.0)
        loglik += lse - np.log(M)
        mean_prev = cloud.estimate()
        stats = (zeta * cloud.stats[idx] + (1.0 - zeta) * mean_prev
                 + model.obs_score(obs[t], new, t) + model.transition_score(new, old, t))
        cloud = ParticleCloud(new, w, stats, zeta)
        ess[t] = cloud.ess
        if ess[t] < 2:
            raise WeightDegeneracy(t, ess[t])
    return RbResult(cloud.estimate(), float(loglik), ess)


@dataclass(frozen=True)
class ScalarAR1Model:
    """beta_1 ~ N(m0, v0), beta_t = theta beta_{t-1} + N(0, q), y_t = beta_t + N(0, r).

    The score is with respect to ``theta``; the test bed for :func:`rb_gradient`.
    """

    theta: float
    q: float
    r: float
    m0: float = 0.0
    v0: float = 1.0

    def sample_initial(self, M, rng):
        return self.m0 + np.sqrt(self.v0) * rng.standard_normal((M, 1))

    def initial_score(self, particles):
        return np.zeros((particles.shape[0], 1))

    def propagate(self, particles, t, rng):
        return self.theta * particles + np.sqrt(self.q) * rng.standard_normal(particles.shape)

    def transition_score(self, new, old, t):
        return (new - self.theta * old) * old / self.q

    def obs_logpdf(self, y_t, particles, t):
        return -0.5 * (np.log(2 * np.pi * self.r) + (y_t - particles[:, 0]) ** 2 / self.r)

    def obs_score(self, y_t, particles, t):
        return np.zeros((particles.shape[0], 1))

    def transition_logpdf(self, new, old, t):
        return -0.5 * (np.log(2 * np.pi * self.q) + (new[:, 0] - self.theta * old[:, 0]) ** 2 / self.q)

    def predictive_logpdf(self, y_t, particles, t):
        v = self.q + self.r
        return -0.5 * (np.log(2 * np.pi * v) + (y_t - self.theta * particles[:, 0]) ** 2 / v)

    def sample_adapted(self, old, y_t, t, rng):
        # beta_t | beta_{t-1}, y_t
        v = 1.0 / (1.0 / self.q + 1.0 / self.r)
        m = v * (self.theta * old[:, 0] / self.q + y_t / self.r)
        new = m + np.sqrt(v) * rng.standard_normal(m.shape)
        logq = -0.5 * (np.log(2 * np.pi * v) + (new - m) ** 2 / v)
        return new[:, None], logq
