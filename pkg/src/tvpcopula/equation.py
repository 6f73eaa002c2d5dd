"""Per-equation Bayesian estimation of a time-varying-coefficient regression
with stochastic volatility.

Each equation is ``y_t = z_t' beta_t + exp(h_t / 2) u*_t`` with
``beta_t = A beta_{t-1} + eps_t``, ``eps_t ~ N(0, Sigma)``, and ``h_t`` the
AR(1) log-variance from :mod:`tvpcopula.sv`. A Gibbs sweep updates, in order,
the coefficient path (jointly with ``beta_0``), the mixture indicators, the
log-variance path, the SV parameters and the law of motion (A, Sigma, beta_0).

Equations never share state, so a system of n equations is n independent
calls to :func:`estimate_equation`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .kalman import LinearGaussianSSM, simulation_smoother
from .sv import KSC_TABLE, SvParams, SvPrior, linearize, sample_indicators, sample_sv_params, sample_volpath

logger = logging.getLogger(__name__)

BLOCKS = ("beta", "indicators", "h", "sv", "motion")


# ---------------------------------------------------------------------------
# regressors and random compression

@dataclass(frozen=True)
class CompressionMatrix:
    """Random projection of the stacked lags of all series.

    ``raw`` holds the tri-valued draw, ``Phi`` its row-orthonormalised version.
    """

    Phi: np.ndarray
    raw: np.ndarray
    phi: float
    seed: int | None = None

    @property
    def rows(self) -> int:
        return self.Phi.shape[0]


def draw_compression(rng: np.random.Generator, p_max: int, n_lagged: int, phi: float | None = None,
                     rows: int | None = None, max_tries: int = 100, seed: int | None = None) -> CompressionMatrix:
    """Draw a compression matrix.

    phi ~ U(0.1, 1) and the row count ~ U{1..p_max} (capped at ``n_lagged``)
    unless forced. Entries are -phi^-1/2, 0, phi^-1/2 with probabilities
    phi^2, 2 phi (1 - phi), (1 - phi)^2; rows are then Gram-Schmidt
    orthonormalised. Rank-deficient draws are redrawn.
    """
    if p_max < 1:
        raise ValueError("p_max must be at least 1")
    if phi is None:
        phi = float(rng.uniform(0.1, 1.0))
    if rows is None:
        rows = int(rng.integers(1, p_max + 1))
    rows = min(rows, n_lagged)
    probs = np.array([phi ** 2, 2 * phi * (1 - phi), (1 - phi) ** 2])
    values = np.array([-1.0, 0.0, 1.0]) / np.sqrt(phi)
    best = None
    for _ in range(max_tries):
        raw = values[rng.choice(3, size=(rows, n_lagged), p=probs)]
        rank = np.linalg.matrix_rank(raw)
        if rank == rows:
            break
        if best is None or rank > best[0]:
            best = (rank, raw)
    else:
        # near phi = 1 rows are almost surely identical; keep an independent subset
        rank, raw = best
        if rank == 0:
            raise RuntimeError(f"no non-zero compression matrix in {max_tries} draws (phi={phi:.3f})")
        _, _, piv = linalg.qr(raw.T, pivoting=True)
        raw = raw[np.sort(piv[:rank])]
        logger.debug("compression draw reduced to %d independent rows (phi=%.3f)", rank, phi)
    Phi = gram_schmidt(raw)
    return CompressionMatrix(Phi, raw, float(phi), seed)


def gram_schmidt(rows: np.ndarray) -> np.ndarray:
    """Orthonormalise the rows of a full-row-rank matrix (modified Gram-Schmidt, two passes)."""
    out = np.array(rows, dtype=float)
    for i in range(out.shape[0]):
        for _ in range(2):
            for j in range(i):
                out[i] -= (out[i] @ out[j]) * out[j]
        out[i] /= np.linalg.norm(out[i])
    return out


@dataclass(frozen=True)
class EquationSpec:
    """Which regressors equation i uses and whether its errors have SV."""

    variant: str = "own-lags"
    p: int = 1
    compression: CompressionMatrix | None = None
    sv: bool = True

    def __post_init__(self):
        if self.variant not in ("own-lags", "compressed"):
            raise ValueError(f"unknown equation variant {self.variant!r}")
        if self.p < 1:
            raise ValueError("lag order p must be at least 1")
        if self.variant == "compressed" and self.compression is None:
            raise ValueError("compressed variant needs a compression matrix")

    def k(self, n: int) -> int:
        return self.p if self.variant == "own-lags" else self.compression.rows


def stacked_lags(values: np.ndarray, p: int) -> np.ndarray:
    """Rows ``(y_{t-1}', ..., y_{t-p}')`` for t = p..T-1, shape (T-p, n*p)."""
    T = values.shape[0]
    return np.hstack([values[p - j:T - j] for j in range(1, p + 1)])


def build_regressors(values, spec: EquationSpec, i: int):
    """Targets and regressors for equation ``i``.

    Returns:
        (y, Z): y has length T-p and Z is (T-p, k), row t aligned with y[t].
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    T, n = values.shape
    if T <= spec.p + 1:
        raise ValueError(f"{T} observations are not enough for {spec.p} lags")
    y = values[spec.p:, i]
    if spec.variant == "own-lags":
        Z = stacked_lags(values[:, [i]], spec.p)
    else:
        lagged = stacked_lags(values, spec.p)
        if spec.compression.Phi.shape[1] != lagged.shape[1]:
            raise ValueError("compression matrix width does not match n * p")
        Z = lagged @ spec.compression.Phi.T
    return y, Z


def regressor_row(history: np.ndarray, spec: EquationSpec, i: int) -> np.ndarray:
    """Regressor vector for the period after ``history`` (rows oldest to newest)."""
    p = spec.p
    if spec.variant == "own-lags":
        return history[-1:-p - 1:-1, i].copy()
    lags = np.concatenate([history[-j] for j in range(1, p + 1)])
    return spec.compression.Phi @ lags


# ---------------------------------------------------------------------------
# state and priors

@dataclass(frozen=True)
class EquationPrior:
    """Priors of one equation.

    ``coef_mean``/``coef_var`` apply element-wise to vec(A) and beta_0. Sigma
    has an inverse-Wishart kernel with ``sigma_df``/``sigma_scale``; the
    default (0, None) is the Jeffreys-type prior ``|Sigma|^-(k+1)/2``.
    """

    coef_mean: float | np.ndarray = 0.0
    coef_var: float | np.ndarray = 10.0
    beta0_mean: float | np.ndarray = 0.0
    beta0_var: float | np.ndarray = 10.0
    sigma_df: float = 0.0
    sigma_scale: np.ndarray | None = None
    sv: SvPrior = field(default_factory=SvPrior)
    # homoskedastic variance: inverse-gamma kernel, default p(s2) ~ 1/s2
    var_shape: float = 0.0
    var_scale: float = 0.0


@dataclass
class TvpState:
    beta_path: np.ndarray  # (T, k)
    beta0: np.ndarray  # (k,)
    A_beta: np.ndarray  # (k, k)
    Sigma: np.ndarray  # (k, k)
    sv: SvParams
    h: np.ndarray  # (T,)
    indicators: np.ndarray | None = None
    loglik: float = float("nan")
    loglik_increments: np.ndarray | None = None

    def copy(self) -> "TvpState":
        return TvpState(self.beta_path.copy(), self.beta0.copy(), self.A_beta.copy(), self.Sigma.copy(),
                        self.sv, self.h.copy(), None if self.indicators is None else self.indicators.copy(),
                        self.loglik, None if self.loglik_increments is None else self.loglik_increments.copy())

    def to_dict(self) -> dict:
        return {
            "beta_path": self.beta_path.tolist(), "beta0": self.beta0.tolist(),
            "A_beta": self.A_beta.tolist(), "Sigma": self.Sigma.tolist(),
            "sv": [self.sv.alpha, self.sv.gamma, self.sv.delta], "h": self.h.tolist(),
            "loglik": self.loglik,
        }


@dataclass(frozen=True)
class EquationData:
    y: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != y.shape[0]:
            raise ValueError("y and Z lengths differ")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "Z", Z)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.Z.shape[1]


def _as_vec(x, k):
    return np.broadcast_to(np.asarray(x, dtype=float), (k,)).copy()


def initial_state(data: EquationData, spec: EquationSpec | None = None) -> TvpState:
    """Static OLS start: constant coefficient path and constant log-variance."""
    coef, *_ = np.linalg.lstsq(data.Z, data.y, rcond=None)
    resid = data.y - data.Z @ coef
    s2 = max(float(np.var(resid)), 1e-8)
    k = data.k
    return TvpState(
        beta_path=np.tile(coef, (data.T, 1)),
        beta0=coef.copy(),
        A_beta=np.eye(k) * 0.95,
        Sigma=np.eye(k) * 1e-3 * max(1.0, float(coef @ coef)),
        sv=SvParams(0.1 * np.log(s2), 0.9, 0.05),
        h=np.full(data.T, np.log(s2)),
    )


def extend_state(state: TvpState, T: int) -> TvpState:
    """Warm start for a longer sample: pad the paths to length ``T`` by
    propagating the last values through the mean laws of motion."""
    s = state.copy()
    extra = T - s.beta_path.shape[0]
    if extra < 0:
        raise ValueError("cannot shorten a state")
    beta, h = list(s.beta_path), list(s.h)
    for _ in range(extra):
        beta.append(s.A_beta @ beta[-1])
        h.append(s.sv.alpha + s.sv.gamma * h[-1])
    s.beta_path, s.h = np.array(beta), np.array(h)
    s.indicators, s.loglik_increments = None, None
    return s


# ---------------------------------------------------------------------------
# Gibbs blocks

def coefficient_ssm(state: TvpState, data: EquationData, prior: EquationPrior) -> LinearGaussianSSM:
    """State-space form of the coefficient path with beta_0 as an unobserved period 0."""
    T, k = data.T, data.k
    Z = np.zeros((T + 1, 1, k))
    Z[1:, 0, :] = data.Z
    R = np.ones((T + 1, 1, 1))
    R[1:, 0, 0] = np.exp(state.h)
    return LinearGaussianSSM(
        transition=state.A_beta,
        state_cov=state.Sigma,
        loading=Z,
        obs_cov=R,
        init_mean=_as_vec(prior.beta0_mean, k),
        init_cov=np.diag(_as_vec(prior.beta0_var, k)),
    )


def draw_beta_path(state: TvpState, data: EquationData, rng: np.random.Generator,
                   prior: EquationPrior = EquationPrior()):
    """Joint draw of (beta_0, beta_1..beta_T) given h, A and Sigma by forward filtering,
    backward sampling.

    Returns:
        (beta0, beta_path, filter_output); the filter log-likelihood is
        log p(y | h, A, Sigma) with the coefficient path integrated out.
    """
    obs = np.concatenate([[np.nan], data.y])[:, None]
    path, out = simulation_smoother(coefficient_ssm(state, data, prior), obs, rng, return_filter=True)
    return path[0], path[1:], out


def _draw_inv_wishart(df, scale, rng):
    k = scale.shape[0]
    # Bartlett decomposition of W ~ Wishart(df, scale^-1); Sigma = W^-1
    L = np.linalg.cholesky(np.linalg.inv(scale))
    B = np.zeros((k, k))
    for i in range(k):
        B[i, i] = np.sqrt(rng.chisquare(df - i))
        B[i, :i] = rng.standard_normal(i)
    LB = L @ B
    W = LB @ LB.T
    S = np.linalg.inv(W)
    return 0.5 * (S + S.T)


def draw_law_of_motion(state: TvpState, rng: np.random.Generator, prior: EquationPrior = EquationPrior()):
    """Draw A | Sigma, path, then Sigma | A, path, then beta_0 | beta_1, A, Sigma.

    Returns:
        (A_beta, Sigma, beta0)
    """
    path = np.vstack([state.beta0, state.beta_path])
    X, Y = path[:-1], path[1:]
    T, k = Y.shape
    Sinv = np.linalg.inv(state.Sigma)
    # vec over rows of A: a = A.reshape(-1); Y_t = A X_t + e_t
    prior_prec = 1.0 / _as_vec(prior.coef_var, k * k)
    prior_mean = _as_vec(prior.coef_mean, k * k)
    prec = np.kron(Sinv, X.T @ X) + np.diag(prior_prec)
    lin = (X.T @ Y @ Sinv).T.reshape(-1) + prior_prec * prior_mean
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, lin)
    A = (mean + np.linalg.solve(L.T, rng.standard_normal(k * k))).reshape(k, k)

    E = Y - X @ A.T
    S = E.T @ E
    if prior.sigma_scale is not None:
        S = S + np.asarray(prior.sigma_scale, dtype=float)
    S = 0.5 * (S + S.T)
    if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S).min() < -1e-8 * max(1.0, np.trace(S)):
        raise FloatingPointError("law-of-motion scale matrix is not PSD; coefficient path is corrupted")
    S = S + 1e-12 * np.eye(k) * max(1.0, np.trace(S) / k)
    df = T + prior.sigma_df
    Sigma = _draw_inv_wishart(df, S, rng)

    beta0 = draw_beta0(A, Sigma, state.beta_path[0], rng, prior)
    return A, Sigma, beta0


def draw_beta0(A: np.ndarray, Sigma: np.ndarray, beta1: np.ndarray, rng: np.random.Generator,
               prior: EquationPrior = EquationPrior()) -> np.ndarray:
    """Gaussian conditional of beta_0 given beta_1 = A beta_0 + e, e ~ N(0, Sigma)."""
    k = A.shape[0]
    b_prec = np.diag(1.0 / _as_vec(prior.beta0_var, k))
    SigmaInv = np.linalg.inv(Sigma)
    prec0 = b_prec + A.T @ SigmaInv @ A
    lin0 = b_prec @ _as_vec(prior.beta0_mean, k) + A.T @ SigmaInv @ beta1
    L0 = np.linalg.cholesky(prec0)
    return np.linalg.solve(prec0, lin0) + np.linalg.solve(L0.T, rng.standard_normal(k))


def _residuals(state: TvpState, data: EquationData) -> np.ndarray:
    return data.y - np.einsum("tk,tk->t", data.Z, state.beta_path)


def gibbs_sweep(state: TvpState, data: EquationData, rng: np.random.Generator,
                spec: EquationSpec = EquationSpec(), prior: EquationPrior = EquationPrior(),
                blocks=BLOCKS, offset: float | None = None) -> TvpState:
    """One full sweep; blocks not listed in ``blocks`` are held fixed."""
    s = state.copy()
    if "beta" in blocks:
        s.beta0, s.beta_path, out = draw_beta_path(s, data, rng, prior)
        s.loglik = out.loglik
        s.loglik_increments = out.loglik_increments[1:]
    if spec.sv:
        if "indicators" in blocks or "h" in blocks:
            ystar = linearize(_residuals(s, data), offset)
            if "indicators" in blocks:
                s.indicators = sample_indicators(ystar, s.h, KSC_TABLE, rng)
            if "h" in blocks:
                if s.indicators is None:
                    s.indicators = sample_indicators(ystar, s.h, KSC_TABLE, rng)
                s.h = sample_volpath(ystar, s.indicators, s.sv, rng, prior=prior.sv)
        if "sv" in blocks:
            s.sv = sample_sv_params(s.h, rng, current=s.sv, prior=prior.sv)
    elif "h" in blocks:
        r = _residuals(s, data)
        shape = prior.var_shape + 0.5 * data.T
        scale = prior.var_scale + 0.5 * float(r @ r)
        s.h = np.full(data.T, np.log(scale / rng.gamma(shape)))
    if "motion" in blocks:
        s.A_beta, s.Sigma, s.beta0 = draw_law_of_motion(s, rng, prior)
    return s


# ---------------------------------------------------------------------------
# full estimation

@dataclass(frozen=True)
class McmcConfig:
    burn_in: int = 5000
    retained: int = 10000
    thin: int = 1
    offset: float | None = None

    def __post_init__(self):
        if self.burn_in < 0 or self.retained < 1 or self.thin < 1:
            raise ValueError("burn_in >= 0, retained >= 1 and thin >= 1 required")


class EstimationDiverged(FloatingPointError):
    """Raised when the chain produces a non-finite log-likelihood; carries the state."""

    def __init__(self, message, state: TvpState, iteration: int):
        super().__init__(message)
        self.state = state
        self.iteration = iteration

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps({"iteration": self.iteration, "state": self.state.to_dict()}))


@dataclass
class EquationPosterior:
    """Retained draws of one equation, stacked along a leading draw axis."""

    beta_path: np.ndarray  # (R, T, k)
    beta0: np.ndarray  # (R, k)
    A_beta: np.ndarray  # (R, k, k)
    Sigma: np.ndarray  # (R, k, k)
    h: np.ndarray  # (R, T)
    sv: np.ndarray  # (R, 3): alpha, gamma, delta
    loglik: np.ndarray  # (R,)
    log_marginal_likelihood: float
    spec: EquationSpec | None = None

    @property
    def draws(self) -> int:
        return self.loglik.shape[0]

    def state(self, r: int) -> TvpState:
        return TvpState(self.beta_path[r], self.beta0[r], self.A_beta[r], self.Sigma[r],
                        SvParams(*self.sv[r]), self.h[r])

    def save(self, path) -> None:
        """Write a chain file: one record per retained draw, indexed by ``draw_index``."""
        meta = {"log_marginal_likelihood": self.log_marginal_likelihood}
        if self.spec is not None:
            meta["spec"] = {"variant": self.spec.variant, "p": self.spec.p, "sv": self.spec.sv}
            if self.spec.compression is not None:
                c = self.spec.compression
                meta["spec"]["compression"] = {"phi": c.phi, "seed": c.seed, "raw": c.raw.tolist(),
                                               "Phi": c.Phi.tolist()}
        with open(path, "wb") as fh:
            np.savez(fh, draw_index=np.arange(self.draws), beta_path=self.beta_path, beta0=self.beta0,
                     A_beta=self.A_beta, Sigma=self.Sigma, h=self.h, sv=self.sv, loglik=self.loglik,
                     meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "EquationPosterior":
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["meta"]))
            spec = None
            if "spec" in meta:
                sp = meta["spec"]
                comp = None
                if "compression" in sp:
                    c = sp["compression"]
                    comp = CompressionMatrix(np.array(c["Phi"]), np.array(c["raw"]), c["phi"], c["seed"])
                spec = EquationSpec(sp["variant"], sp["p"], comp, sp["sv"])
            return cls(f["beta_path"], f["beta0"], f["A_beta"], f["Sigma"], f["h"], f["sv"], f["loglik"],
                       meta["log_marginal_likelihood"], spec)


def predictive_log_marginal_likelihood(increments: np.ndarray) -> float:
    """Sum over t of log of the draw-averaged one-step predictive density.

    ``increments`` is (R, T): log p(y_t | y_{1:t-1}, draw r).
    """
    R = increments.shape[0]
    return float(np.sum(logsumexp(increments, axis=0) - np.log(R)))


def estimate_equation(data: EquationData, spec: EquationSpec, config: McmcConfig, rng: np.random.Generator,
                      prior: EquationPrior = EquationPrior(), init: TvpState | None = None) -> EquationPosterior:
    """Run burn-in plus retained Gibbs sweeps for one equation."""
    state = init.copy() if init is not None else initial_state(data, spec)
    R, T, k = config.retained, data.T, data.k
    out = dict(
        beta_path=np.empty((R, T, k)), beta0=np.empty((R, k)), A_beta=np.empty((R, k, k)),
        Sigma=np.empty((R, k, k)), h=np.empty((R, T)), sv=np.empty((R, 3)), loglik=np.empty(R),
    )
    increments = np.empty((R, T))
    total = config.burn_in + R * config.thin
    r = 0
    for it in range(total):
        try:
            state = gibbs_sweep(state, data, rng, spec, prior, offset=config.offset)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise EstimationDiverged(f"sweep {it} failed: {exc}", state, it) from exc
        if not np.isfinite(state.loglik):
            raise EstimationDiverged(f"non-finite log-likelihood at sweep {it}", state, it)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == config.thin - 1:
            out["beta_path"][r] = state.beta_path
            out["beta0"][r] = state.beta0
            out["A_beta"][r] = state.A_beta
            out["Sigma"][r] = state.Sigma
            out["h"][r] = state.h
            out["sv"][r] = (state.sv.alpha, state.sv.gamma, state.sv.delta)
            out["loglik"][r] = state.loglik
            increments[r] = state.loglik_increments
            r += 1
    if prior.sigma_scale is None and R:
        # with the |Sigma|^-(k+1)/2 kernel the posterior is not normalisable near
        # Sigma = 0 and chains can drift there, freezing the coefficient path
        tr = float(np.median(np.trace(out["Sigma"], axis1=1, axis2=2)))
        if tr < 1e-6 * max(1.0, float(np.mean(out["beta_path"] ** 2)) * k):
            logger.warning("state-noise covariance collapsed toward zero (median trace %.2e); "
                           "a proper inverse-Wishart prior (sigma_df, sigma_scale) avoids this", tr)
    return EquationPosterior(**out, log_marginal_likelihood=predictive_log_marginal_likelihood(increments),
                             spec=spec)


def model_average_compressions(posteriors) -> np.ndarray:
    """Posterior model probabilities from log marginal likelihoods.

    Accepts EquationPosterior objects or plain log marginal likelihoods.
    """
    logml = np.array([getattr(p, "log_marginal_likelihood", p) for p in posteriors], dtype=float)
    if logml.size == 0:
        raise ValueError("need at least one candidate")
    finite = np.isfinite(logml)
    if not finite.any():
        raise ValueError("all marginal likelihoods are non-finite")
    w = np.zeros_like(logml)
    w[finite] = np.exp(logml[finite] - logml[finite].max())
    return w / w.sum()
