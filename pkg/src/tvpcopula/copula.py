"""Gaussian mixture copula (GMCM) on probability integral transforms.

For PITs ``v`` in (0,1)^n the log copula density is

    log c(v) = log f(x) - sum_j log f_j(x_j),    x_j = F_j^{-1}(v_j),

where ``f`` is the G-component normal mixture, ``f_j``/``F_j`` its j-th
coordinate marginal density/cdf. Gradients with respect to the mixture
parameters include the dependence of ``x`` on the parameters through the
quantile map (``dx_j = -dF_j / f_j``).

Identification: ``mu_1 = 0`` and ``Omega_1`` has unit diagonal. Weights are
ordered ``p_1 < ... < p_G`` by construction of the unconstrained coordinates.

Covariance representations for components ``g >= 2``:

``full``  each Omega_g free (Cholesky factor, log diagonal);
``S1``    Omega_g = h_g Omega_{g-1} + diag(V_g);
``S2``    Omega_g = q_g^2 Z_g Z_g' + diag(D_g), Z_g an n x k standard normal
          matrix regenerated from a stored seed.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri

from .mala import MalaChain, MalaConfig, TargetSpec, run_mala
from .rng import derive_seed, stream

logger = logging.getLogger(__name__)

PIT_CLIP = 1e-10
REPRESENTATIONS = ("full", "S1", "S2")
_LOG_2PI = math.log(2 * math.pi)
# Box used by the mode search. Mixture likelihoods are unbounded as a
# component collapses onto a lower-dimensional set; these limits keep the
# optimiser away from such singular points (|corr| <= 0.97 in Omega_1,
# component scales >= exp(-3) on the normal-score scale).
_GAP_BOUNDS = (-12.0, 6.0)
_CORR_BOUNDS = (-4.0, 4.0)
_CHOL_DIAG_BOUNDS = (-3.0, 3.0)
_STRUCT_BOUNDS = (-6.0, 4.0)


class QuantileError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PITs

@dataclass(frozen=True)
class PitPanel:
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.ndim != 2:
            raise ValueError("PIT panel must be T x n")
        if not np.all(np.isfinite(v)) or v.min(initial=0.5) < 0 or v.max(initial=0.5) > 1:
            raise ValueError("PITs must lie in [0, 1]")
        v = np.clip(v, PIT_CLIP, 1 - PIT_CLIP)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def T(self) -> int:
        return self.v.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[1]


def pit_from_draws(y, Z, beta_draws, h_draws) -> np.ndarray:
    """Posterior-averaged conditional cdf of ``y_t`` under N(z_t' beta_t, exp(h_t)).

    Args:
        y: (T,), Z: (T, k), beta_draws: (S, T, k), h_draws: (S, T).
    """
    beta_draws = np.asarray(beta_draws, dtype=float)
    h_draws = np.asarray(h_draws, dtype=float)
    if beta_draws.shape[0] == 0:
        raise ValueError("empty posterior")
    mean = np.einsum("tk,stk->st", np.asarray(Z, dtype=float), beta_draws)
    return ndtr((np.asarray(y, dtype=float)[None] - mean) * np.exp(-0.5 * h_draws)).mean(axis=0)


def compute_pits(posteriors, datas) -> PitPanel:
    """PITs for a system: one equation posterior and its data per column.

    Series may have different sample lengths (lag orders); the panel keeps
    the common trailing periods.
    """
    cols = [pit_from_draws(d.y, d.Z, p.beta_path, p.h) for p, d in zip(posteriors, datas, strict=True)]
    if not cols:
        raise ValueError("no equations")
    T = min(len(c) for c in cols)
    return PitPanel(np.column_stack([c[len(c) - T:] for c in cols]))


# ---------------------------------------------------------------------------
# parameter containers

def _check_psd(mat, what):
    w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if not np.all(np.isfinite(w)) or w.min() <= 0:
        raise ValueError(f"{what} is not positive definite (min eigenvalue {w.min():.3g})")


@dataclass(frozen=True)
class S1Params:
    """Omega_g = h_g Omega_{g-1} + diag(V_g), g = 2..G; rows of h/V index g = 2..G."""

    Omega1: np.ndarray
    h: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Omega1", np.asarray(self.Omega1, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float).reshape(-1))
        V = np.asarray(self.V, dtype=float).reshape(len(self.h), self.Omega1.shape[0])
        object.__setattr__(self, "V", V)
        if np.any(self.h < 0) or np.any(V < 0):
            raise ValueError("S1 needs h_g >= 0 and V_g >= 0")

    @property
    def G(self) -> int:
        return self.h.size + 1

    @property
    def free_param_count(self) -> int:
        return self.h.size + self.V.size


@dataclass(frozen=True)
class S2Params:
    """Omega_g = q_g^2 Z_g Z_g' + diag(D_g) with Z_g ~ N(0,1)^{n x k} from ``seeds[g-2]``."""

    Omega1: np.ndarray
    q: np.ndarray
    D: np.ndarray
    seeds: tuple
    k: int

    def __post_init__(self):
        object.__setattr__(self, "Omega1", np.asarray(self.Omega1, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(-1))
        D = np.asarray(self.D, dtype=float).reshape(len(self.q), self.Omega1.shape[0])
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if len(self.seeds) != self.q.size:
            raise ValueError("one projection seed per component g >= 2 is required")
        if np.any(self.q < 0) or np.any(D < 0):
            raise ValueError("S2 needs q_g >= 0 and D_g >= 0")
        if self.k < 1:
            raise ValueError("projection rank k must be positive")

    @property
    def G(self) -> int:
        return self.q.size + 1

    @property
    def free_param_count(self) -> int:
        return self.q.size + self.D.size


def default_rank(n: int) -> int:
    return max(1, math.ceil(math.log(n)))


def s2_loadings(seed: int, n: int, k: int) -> np.ndarray:
    """Standard normal n x k matrix regenerated from ``seed``."""
    return stream(seed, "s2-loadings").standard_normal((n, k))


def expand_s1(params: S1Params) -> list:
    out = [params.Omega1]
    for g in range(params.h.size):
        Om = params.h[g] * out[-1] + np.diag(params.V[g])
        _check_psd(Om, f"S1 covariance of component {g + 2}")
        out.append(Om)
    return out


def expand_s2(params: S2Params) -> list:
    n = params.Omega1.shape[0]
    out = [params.Omega1]
    for g, seed in enumerate(params.seeds):
        Zg = s2_loadings(seed, n, params.k)
        Om = params.q[g] ** 2 * (Zg @ Zg.T) + np.diag(params.D[g])
        _check_psd(Om, f"S2 covariance of component {g + 2}")
        out.append(Om)
    return out


def covariance_param_count(representation: str, G: int, n: int) -> int:
    """Free covariance parameters beyond Omega_1."""
    if representation == "full":
        return (G - 1) * n * (n + 1) // 2
    if representation in ("S1", "S2"):
        return (G - 1) * (n + 1)
    raise ValueError(f"unknown representation {representation!r}")


@dataclass(frozen=True)
class GmcmParams:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    representation: str = "full"
    structure: S1Params | S2Params | None = None

    def __post_init__(self):
        p = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        G = p.size
        if mu.ndim == 1:
            mu = mu.reshape(G, -1)
        n = mu.shape[1]
        if mu.shape != (G, n) or covs.shape != (G, n, n):
            raise ValueError(f"inconsistent shapes: weights {p.shape}, means {mu.shape}, covs {covs.shape}")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if np.any(p <= 0) or abs(p.sum() - 1) > 1e-10:
            raise ValueError("weights must be positive and sum to one")
        if np.any(np.diff(p) <= 0):
            raise ValueError("weights must be strictly increasing")
        for g in range(G):
            _check_psd(covs[g], f"covariance of component {g + 1}")
        for a in (p, mu, covs):
            a.setflags(write=False)
        object.__setattr__(self, "weights", p)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", covs)

    @property
    def G(self) -> int:
        return self.weights.size

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, corr) -> "GmcmParams":
        corr = np.asarray(corr, dtype=float)
        return cls(np.ones(1), np.zeros((1, corr.shape[0])), corr[None])

    def to_json(self) -> str:
        d = {"representation": self.representation, "G": self.G, "n": self.n,
             "weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist(),
             "structure": None}
        s = self.structure
        if isinstance(s, S1Params):
            d["structure"] = {"Omega1": s.Omega1.tolist(), "h": s.h.tolist(), "V": s.V.tolist()}
        elif isinstance(s, S2Params):
            d["structure"] = {"Omega1": s.Omega1.tolist(), "q": s.q.tolist(), "D": s.D.tolist(),
                              "seeds": list(s.seeds), "k": s.k}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "GmcmParams":
        d = json.loads(text)
        rep = d["representation"]
        s = d.get("structure")
        structure = None
        if s is not None:
            structure = S1Params(s["Omega1"], s["h"], s["V"]) if rep == "S1" else \
                S2Params(s["Omega1"], s["q"], s["D"], tuple(s["seeds"]), s["k"])
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covs"]), rep, structure)


# ---------------------------------------------------------------------------
# mixture marginals

def _marginal_parts(x, p, mu, sd):
    # x (T, n); returns z (T, G, n), log component densities incl. weight, log f_j (T, n)
    z = (x[:, None, :] - mu[None]) / sd[None]
    logcomp = np.log(p)[None, :, None] - 0.5 * z ** 2 - 0.5 * _LOG_2PI - np.log(sd)[None]
    return z, logcomp, logsumexp(logcomp, axis=1)


def mixture_quantile(v, p, mu, sd, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Coordinate-wise quantiles of normal-mixture marginals.

    Args:
        v: (T, n) probabilities. p: (G,) weights; mu, sd: (G, n).

    Safeguarded Newton: a step leaving the current bracket is replaced by
    bisection. The initial bracket uses that every component cdf is at least
    (at most) v above (below) it.
    """
    v = np.asarray(v, dtype=float)
    qz = ndtri(v)
    cand = mu[None] + sd[None] * qz[:, None, :]
    lo, hi = cand.min(axis=1), cand.max(axis=1)
    x = 0.5 * (lo + hi)
    done = (hi - lo) <= 1e-15 * (1 + np.abs(x))
    for _ in range(max_iter):
        z = (x[:, None, :] - mu[None]) / sd[None]
        F = np.einsum("g,tgn->tn", p, ndtr(z))
        dens = np.einsum("g,tgn->tn", p, np.exp(-0.5 * z ** 2) / sd[None]) / math.sqrt(2 * math.pi)
        err = F - v
        done |= np.abs(err) < tol
        if done.all():
            return x
        lo = np.where(err < 0, x, lo)
        hi = np.where(err > 0, x, hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            xn = x - err / dens
        bad = ~np.isfinite(xn) | (xn <= lo) | (xn >= hi)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        done |= (hi - lo) <= 4e-16 * (1 + np.abs(xn))
        x = np.where(done, x, xn)
    raise QuantileError(f"mixture quantile did not converge for {int((~done).sum())} entries")


def mixture_cdf(x, p, mu, sd) -> np.ndarray:
    z = (np.asarray(x, dtype=float)[:, None, :] - mu[None]) / sd[None]
    return np.einsum("g,tgn->tn", p, ndtr(z))


# ---------------------------------------------------------------------------
# density and gradient in natural parameters

def _core(v, p, mu, covs, want_grad):
    T, n = v.shape
    G = p.size
    sd = np.sqrt(np.diagonal(covs, axis1=1, axis2=2))
    x = mixture_quantile(v, p, mu, sd)
    z, logcomp_m, logf_m = _marginal_parts(x, p, mu, sd)
    logjoint = np.empty((T, G))
    us = np.empty((G, T, n))
    invs = np.empty((G, n, n))
    for g in range(G):
        c, low = linalg.cho_factor(covs[g], lower=True)
        d = x - mu[g]
        u = linalg.cho_solve((c, low), d.T).T
        logdet = 2.0 * np.log(np.diag(c)).sum()
        logjoint[:, g] = np.log(p[g]) - 0.5 * (n * _LOG_2PI + logdet + np.einsum("tn,tn->t", d, u))
        us[g] = u
        if want_grad:
            invs[g] = linalg.cho_solve((c, low), np.eye(n))
    logf = logsumexp(logjoint, axis=1)
    logc = logf - logf_m.sum(axis=1)
    if not want_grad:
        return logc, None
    r = np.exp(logjoint - logf[:, None])  # (T, G) joint responsibilities
    rm = np.exp(logcomp_m - logf_m[:, None, :])  # (T, G, n) marginal responsibilities
    # d logc / dx_j at fixed parameters
    dx = -np.einsum("tg,gtn->tn", r, us) + np.einsum("tgn,tgn->tn", rm, z / sd[None])
    # Phi(z_gj) / f_j(x_j)
    cdf_ratio = np.exp(log_ndtr(z) - logf_m[:, None, :])
    g_p = (r.sum(0) - rm.sum(axis=(0, 2))) / p - np.einsum("tn,tgn->g", dx, cdf_ratio)
    g_mu = (np.einsum("tg,gtn->gn", r, us) - np.einsum("tgn,tgn->gn", rm, z / sd[None])
            + np.einsum("tn,tgn->gn", dx, rm))
    g_cov = np.empty((G, n, n))
    s = sd ** 2
    for g in range(G):
        g_cov[g] = 0.5 * (np.einsum("t,ti,tj->ij", r[:, g], us[g], us[g]) - r[:, g].sum() * invs[g])
        diag = (-np.einsum("tn,tn->n", rm[:, g], z[:, g] ** 2 - 1) / (2 * s[g])
                + np.einsum("tn,tn,tn->n", dx, rm[:, g], z[:, g]) * sd[g] / (2 * s[g]))
        g_cov[g][np.diag_indices(n)] += diag
    return logc, (g_p, g_mu, g_cov)


def gmcm_log_density(v, params: GmcmParams):
    """Log copula density for one row (returns a float) or for each row of a T x n array."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    v2 = np.clip(np.atleast_2d(v), PIT_CLIP, 1 - PIT_CLIP)
    if v2.shape[1] != params.n:
        raise ValueError(f"PIT rows have {v2.shape[1]} entries, copula dimension is {params.n}")
    logc, _ = _core(v2, params.weights, params.means, params.covs, False)
    return float(logc[0]) if single else logc


def copula_loglik_and_grad(pits: PitPanel, params: GmcmParams):
    """Sum of log copula densities and its gradient in (weights, means, covariances)."""
    logc, grads = _core(pits.v, params.weights, params.means, params.covs, True)
    return float(logc.sum()), grads


@dataclass(frozen=True)
class CopulaPrior:
    """Independent Gaussian priors on natural copula parameters.

    ``log_weight_center`` (G,) centres a N(., weight_var) prior on each
    log p_g; ``mean_center`` (G, n) centres N(., mean_var) on each mu_g;
    ``chol_center`` (G, n(n+1)/2) centres N(., chol_var) on vech of the
    lower Cholesky factor of Omega_g for g >= 2. A None centre leaves that
    block flat.
    """

    log_weight_center: np.ndarray | None = None
    weight_var: float = 100.0
    mean_center: np.ndarray | None = None
    mean_var: float = 10.0
    chol_center: np.ndarray | None = None
    chol_var: float = 100.0


def _chol_backprop(L, gL):
    """Symmetric gradient in Omega = L L' given the gradient in lower-triangular L."""
    P = np.tril(L.T @ gL)
    P[np.diag_indices_from(P)] *= 0.5
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    S = Linv.T @ P @ Linv
    return 0.5 * (S + S.T)


def copula_log_prior(prior: CopulaPrior, p, mu, covs):
    """Log prior density (up to a constant) and its gradient in (weights, means, covariances)."""
    G, n = mu.shape
    val = 0.0
    g_p = np.zeros(G)
    g_mu = np.zeros((G, n))
    g_cov = np.zeros((G, n, n))
    if prior.log_weight_center is not None:
        d = np.log(p) - np.asarray(prior.log_weight_center, dtype=float)
        val -= 0.5 * float(d @ d) / prior.weight_var
        g_p -= d / (prior.weight_var * p)
    if prior.mean_center is not None:
        d = mu - np.asarray(prior.mean_center, dtype=float)
        val -= 0.5 * float(np.sum(d * d)) / prior.mean_var
        g_mu -= d / prior.mean_var
    if prior.chol_center is not None:
        centre = np.asarray(prior.chol_center, dtype=float)
        tril = np.tril_indices(n)
        for g in range(1, G):
            L = np.linalg.cholesky(covs[g])
            d = L[tril] - centre[g]
            val -= 0.5 * float(d @ d) / prior.chol_var
            gL = np.zeros((n, n))
            gL[tril] = -d / prior.chol_var
            g_cov[g] = _chol_backprop(L, gL)
    return val, (g_p, g_mu, g_cov)


# ---------------------------------------------------------------------------
# unconstrained coordinates

class Parameterization:
    """Map between an unconstrained vector and (weights, means, covariances).

    Layout: G-1 weight-gap logs, (G-1) x n means, n(n-1)/2 strictly-lower
    entries of the unit-triangular factor of Omega_1 (rows renormalised to
    unit length), then per component g >= 2 either a Cholesky factor with log
    diagonal (``full``) or n+1 log scales (S1: h, V; S2: q, D).

    ``log_jacobian`` converts a flat prior on (ordered weights, means,
    covariance parameters) into a density on the unconstrained coordinates;
    Omega_1 coordinates carry a flat prior directly.
    """

    def __init__(self, representation: str, G: int, n: int, seeds=None, k: int | None = None):
        if representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {representation!r}")
        if G < 1 or n < 2:
            raise ValueError("need G >= 1 and n >= 2")
        self.rep, self.G, self.n = representation, G, n
        self.k = default_rank(n) if k is None else int(k)
        self.seeds = tuple(int(s) for s in seeds) if seeds is not None else None
        if representation == "S2" and G > 1:
            if self.seeds is None or len(self.seeds) != G - 1:
                raise ValueError("S2 needs one seed per component g >= 2")
            self.Zs = [s2_loadings(s, n, self.k) for s in self.seeds]
        self.tril = np.tril_indices(n)
        self.stril = np.tril_indices(n, -1)
        self.n_cov = n * (n + 1) // 2 if representation == "full" else n + 1
        self.sizes = [G - 1, (G - 1) * n, n * (n - 1) // 2, (G - 1) * self.n_cov]
        self.dim = int(sum(self.sizes))
        self.offsets = np.cumsum([0] + self.sizes)

    def _split(self, theta):
        o = self.offsets
        eta = theta[o[0]:o[1]]
        mu = theta[o[1]:o[2]].reshape(self.G - 1, self.n)
        l1 = theta[o[2]:o[3]]
        cov = theta[o[3]:o[4]].reshape(self.G - 1, self.n_cov)
        return eta, mu, l1, cov

    def bounds(self) -> list:
        """Per-coordinate (low, high) limits for the mode search; None = unbounded."""
        out = [(None, None)] * self.dim
        o = self.offsets
        for i in range(o[0], o[1]):
            out[i] = _GAP_BOUNDS
        for i in range(o[2], o[3]):
            out[i] = _CORR_BOUNDS
        mask = self.log_scale_mask()
        for i in range(o[3], o[4]):
            if mask[i]:
                out[i] = _CHOL_DIAG_BOUNDS if self.rep == "full" else _STRUCT_BOUNDS
        return out

    def log_scale_mask(self) -> np.ndarray:
        """Coordinates that are logs of scales (bounded during mode search)."""
        mask = np.zeros(self.dim, dtype=bool)
        o = self.offsets
        mask[o[0]:o[1]] = True
        cov = mask[o[3]:o[4]].reshape(self.G - 1, self.n_cov)
        if self.rep == "full":
            diag_pos = [i for i, (a, b) in enumerate(zip(*self.tril)) if a == b]
            cov[:, diag_pos] = True
        else:
            cov[:, :] = True
        mask[o[3]:o[4]] = cov.reshape(-1)
        return mask

    # --- forward ---------------------------------------------------------

    def _omega1(self, l1):
        L = np.eye(self.n)
        L[self.stril] = l1
        norms = np.linalg.norm(L, axis=1)
        C = L / norms[:, None]
        return C @ C.T, C, norms

    def unpack(self, theta):
        """Natural parameters and the structural pieces needed for the gradient."""
        theta = np.asarray(theta, dtype=float)
        eta, mu_free, l1, covp = self._split(theta)
        gaps = np.exp(eta)
        a = np.concatenate([[0.0], np.cumsum(gaps)])
        logp = a - logsumexp(a)
        p = np.exp(logp)
        mu = np.vstack([np.zeros((1, self.n)), mu_free])
        Om1, C, norms = self._omega1(l1)
        covs = [Om1]
        cache = {"gaps": gaps, "p": p, "logp": logp, "C": C, "norms": norms, "L": []}
        if self.rep == "full":
            for g in range(self.G - 1):
                L = np.zeros((self.n, self.n))
                L[self.tril] = covp[g]
                d = np.diag_indices(self.n)
                L[d] = np.exp(L[d])
                cache["L"].append(L)
                covs.append(L @ L.T)
        elif self.rep == "S1":
            for g in range(self.G - 1):
                covs.append(np.exp(covp[g, 0]) * covs[-1] + np.diag(np.exp(covp[g, 1:])))
        else:
            for g in range(self.G - 1):
                Zg = self.Zs[g]
                covs.append(math.exp(covp[g, 0]) ** 2 * (Zg @ Zg.T) + np.diag(np.exp(covp[g, 1:])))
        return p, mu, np.array(covs), cache

    def log_jacobian(self, theta) -> float:
        eta, _, _, covp = self._split(np.asarray(theta, dtype=float))
        p, _, _, cache = self.unpack(theta)
        lj = np.sum(cache["logp"]) + eta.sum()
        if self.rep == "full":
            diag_pos = [i for i, (a, b) in enumerate(zip(*self.tril)) if a == b]
            expo = self.n - np.arange(self.n) + 1  # n - j + 2 with 1-based j
            lj += (self.G - 1) * self.n * math.log(2) + np.sum(covp[:, diag_pos] * expo[None])
        else:
            lj += covp.sum()
        return float(lj)

    def to_params(self, theta) -> GmcmParams:
        p, mu, covs, _ = self.unpack(theta)
        _, _, _, covp = self._split(np.asarray(theta, dtype=float))
        structure = None
        if self.rep == "S1" and self.G > 1:
            structure = S1Params(covs[0], np.exp(covp[:, 0]), np.exp(covp[:, 1:]))
        elif self.rep == "S2" and self.G > 1:
            structure = S2Params(covs[0], np.exp(covp[:, 0]), np.exp(covp[:, 1:]), self.seeds, self.k)
        return GmcmParams(p, mu, covs, self.rep, structure)

    # --- inverse ---------------------------------------------------------

    def from_params(self, params: GmcmParams) -> np.ndarray:
        """Unconstrained coordinates of ``params`` (which must satisfy the normalisation)."""
        if params.G != self.G or params.n != self.n:
            raise ValueError("parameter dimensions do not match")
        if np.any(np.abs(params.means[0]) > 1e-12):
            raise ValueError("mu_1 must be zero")
        a = np.log(params.weights) - np.log(params.weights[0])
        eta = np.log(np.diff(a))
        Om1 = params.covs[0]
        if np.any(np.abs(np.diag(Om1) - 1) > 1e-10):
            raise ValueError("Omega_1 must have unit diagonal")
        L = np.linalg.cholesky(Om1)
        l1 = (L / np.diag(L)[:, None])[self.stril]
        covp = np.empty((self.G - 1, self.n_cov))
        for g in range(1, self.G):
            if self.rep == "full":
                L = np.linalg.cholesky(params.covs[g])
                L[np.diag_indices(self.n)] = np.log(np.diag(L))
                covp[g - 1] = L[self.tril]
            else:
                s = params.structure
                if self.rep == "S1":
                    covp[g - 1] = np.concatenate([[np.log(s.h[g - 1])], np.log(s.V[g - 1])])
                else:
                    covp[g - 1] = np.concatenate([[np.log(s.q[g - 1])], np.log(s.D[g - 1])])
        return np.concatenate([eta, params.means[1:].reshape(-1), l1, covp.reshape(-1)])

    # --- gradient pull-back ----------------------------------------------

    def pullback(self, theta, grads, cache, with_jacobian: bool) -> np.ndarray:
        g_p, g_mu, g_cov = grads
        theta = np.asarray(theta, dtype=float)
        eta, _, _, covp = self._split(theta)
        p = cache["p"]
        out = np.zeros(self.dim)
        o = self.offsets
        # weights: softmax then cumulative exp-gaps
        g_a = p * (g_p - p @ g_p)
        if with_jacobian:
            g_a = g_a + 1.0 - self.G * p
        tail = np.cumsum(g_a[::-1])[::-1]  # tail[m] = sum_{i >= m} g_a[i]
        g_eta = cache["gaps"] * tail[1:]
        if with_jacobian:
            g_eta = g_eta + 1.0
        out[o[0]:o[1]] = g_eta
        out[o[1]:o[2]] = g_mu[1:].reshape(-1)
        # covariances g >= 2, accumulating into Omega_1 for S1
        G_acc = [gc.copy() for gc in g_cov]
        gcov_out = np.zeros((self.G - 1, self.n_cov))
        if self.rep == "full":
            diag_pos = [i for i, (a, b) in enumerate(zip(*self.tril)) if a == b]
            expo = self.n - np.arange(self.n) + 1
            for g in range(self.G - 1):
                L = cache["L"][g]
                gL = 2.0 * G_acc[g + 1] @ L
                gL[np.diag_indices(self.n)] *= np.diag(L)
                row = gL[self.tril]
                if with_jacobian:
                    row[diag_pos] += expo
                gcov_out[g] = row
        elif self.rep == "S1":
            covs = self.unpack(theta)[2]
            for g in range(self.G - 1, 0, -1):
                h = math.exp(covp[g - 1, 0])
                Gg = G_acc[g]
                gcov_out[g - 1, 0] = h * np.sum(Gg * covs[g - 1])
                gcov_out[g - 1, 1:] = np.exp(covp[g - 1, 1:]) * np.diag(Gg)
                G_acc[g - 1] = G_acc[g - 1] + h * Gg
            if with_jacobian:
                gcov_out += 1.0
        else:
            for g in range(self.G - 1):
                Zg = self.Zs[g]
                q2 = math.exp(2 * covp[g, 0])
                gcov_out[g, 0] = 2.0 * q2 * np.sum(G_acc[g + 1] * (Zg @ Zg.T))
                gcov_out[g, 1:] = np.exp(covp[g, 1:]) * np.diag(G_acc[g + 1])
            if with_jacobian:
                gcov_out += 1.0
        out[o[3]:o[4]] = gcov_out.reshape(-1)
        # Omega_1 through row-normalised unit-triangular factor
        G1 = G_acc[0]
        C, norms = cache["C"], cache["norms"]
        gC = 2.0 * G1 @ C
        gL = (gC - np.sum(gC * C, axis=1, keepdims=True) * C) / norms[:, None]
        out[o[2]:o[3]] = gL[self.stril]
        return out


def copula_target(pits: PitPanel, par: Parameterization, with_jacobian: bool = True,
                  prior: CopulaPrior | None = None) -> TargetSpec:
    """Log posterior or log-likelihood on the unconstrained coordinates.

    With ``with_jacobian`` the density is the posterior under flat priors on
    the natural parameters, times ``prior`` when given.
    """
    def value_and_grad(theta):
        try:
            p, mu, covs, cache = par.unpack(theta)
            logc, grads = _core(pits.v, p, mu, covs, True)
            val = float(logc.sum())
            if prior is not None:
                lp, pg = copula_log_prior(prior, p, mu, covs)
                val += lp
                grads = tuple(a + b for a, b in zip(grads, pg))
        except (np.linalg.LinAlgError, linalg.LinAlgError, QuantileError, FloatingPointError, ValueError):
            return -np.inf, np.full(par.dim, np.nan)
        grad = par.pullback(theta, grads, cache, with_jacobian)
        if with_jacobian:
            val += par.log_jacobian(theta)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return -np.inf, np.full(par.dim, np.nan)
        return val, grad
    return TargetSpec(value_and_grad, par.dim)


# ---------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class CopulaFitConfig:
    burn_in: int = 1000
    iterations: int = 2000
    lam: float = 0.05
    n_starts: int = 4
    s2_candidates: int = 10_000
    k: int | None = None
    target_acceptance: tuple = (0.25, 0.30)


@dataclass
class CopulaFit:
    params: GmcmParams
    log_marginal_likelihood: float
    max_loglik: float
    parameterization: Parameterization = field(repr=False)
    mode: np.ndarray = field(repr=False)
    chain: MalaChain | None = field(default=None, repr=False)

    def draws(self):
        """Natural-parameter draws (list of GmcmParams) from the retained chain."""
        if self.chain is None:
            return []
        return [self.parameterization.to_params(th) for th in self.chain.draws]


def _normal_scores(pits: PitPanel):
    return ndtri(pits.v)


def _kmeans(x, G, rng, iters=25):
    # k-means++ seeding followed by Lloyd iterations
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, G):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        centers.append(x[rng.choice(len(x), p=d2 / d2.sum())] if d2.sum() > 0 else x[rng.integers(len(x))])
    centers = np.array(centers)
    for _ in range(iters):
        lab = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for g in range(G):
            if np.any(lab == g):
                centers[g] = x[lab == g].mean(0)
    return lab


def _initial_points(pits: PitPanel, par: Parameterization, rng, n_starts):
    """Starting vectors from k-means clusters of the normal scores.

    Clusters are ordered by size, then shifted and scaled so the smallest
    one has zero mean and unit variances, matching the normalisation.
    """
    x = _normal_scores(pits)
    n, G = par.n, par.G
    starts = []
    for _ in range(max(1, n_starts) if G > 1 else 1):
        lab = _kmeans(x, G, rng) if G > 1 else np.zeros(len(x), dtype=int)
        sizes = np.bincount(lab, minlength=G)
        order = np.argsort(sizes, kind="stable")
        ms, Ss = [], []
        for g in order:
            xg = x[lab == g]
            if len(xg) > n + 1:
                ms.append(xg.mean(0))
                Ss.append(np.cov(xg.T) + 0.05 * np.eye(n))
            else:
                ms.append(x.mean(0) if len(xg) == 0 else xg.mean(0))
                Ss.append(0.5 * np.eye(n))
        sd1 = np.sqrt(np.diag(Ss[0]))
        mu = np.array([(m - ms[0]) / sd1 for m in ms])
        Om = [S / np.outer(sd1, sd1) for S in Ss]
        R = Om[0]
        L = np.linalg.cholesky(R)
        l1 = (L / np.diag(L)[:, None])[par.stril]
        a = np.log(np.maximum(sizes[order], 1) / len(x))
        eta = np.log(np.maximum(np.diff(a), 0.05))
        cov = np.zeros((G - 1, par.n_cov))
        for g in range(1, G):
            if par.rep == "full":
                Lc = np.linalg.cholesky(Om[g])
                Lc[np.diag_indices(n)] = np.log(np.diag(Lc))
                cov[g - 1] = Lc[par.tril]
            elif par.rep == "S1":
                prev, cur = np.diag(Om[g - 1]), np.diag(Om[g])
                h = 0.5 * cur.mean() / prev.mean()
                cov[g - 1] = np.log(np.concatenate([[h], np.maximum(cur - h * prev, 0.05)]))
            else:
                Zg = par.Zs[g - 1]
                q2 = 0.1
                cov[g - 1] = np.log(np.concatenate([[math.sqrt(q2)],
                                                    np.maximum(np.diag(Om[g]) - q2 * np.diag(Zg @ Zg.T), 0.05)]))
        starts.append(np.concatenate([eta, mu[1:].reshape(-1), l1, cov.reshape(-1)]))
    return starts


def _maximise(pits: PitPanel, par: Parameterization, rng, n_starts, with_jacobian):
    target = copula_target(pits, par, with_jacobian)
    bounds = par.bounds()
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])

    def f(th):
        val, g = target.value_and_grad(th)
        if not np.isfinite(val):
            return 1e100, np.zeros_like(th)
        return -val, -g

    best = None
    for x0 in _initial_points(pits, par, rng, n_starts):
        x0 = np.clip(x0, lo, hi)
        res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": 500})
        if res.fun < 1e99 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise RuntimeError("copula mode search failed from every starting point")
    return best.x, -best.fun


def _check_sample_size(pits: PitPanel, par: Parameterization):
    if pits.T <= par.dim:
        raise ValueError(f"{pits.T} observations cannot identify {par.dim} copula parameters "
                         f"({par.rep}, G={par.G}, n={par.n})")


def schwarz_log_ml(max_loglik: float, dim: int, T: int) -> float:
    """Schwarz approximation to the log marginal likelihood."""
    return float(max_loglik - 0.5 * dim * math.log(T))


def fit_mode(pits: PitPanel, G: int, representation: str, rng: np.random.Generator,
             n_starts: int = 4, seeds=None, k=None):
    """Maximum-likelihood point and its Schwarz log marginal likelihood."""
    par = Parameterization(representation, G, pits.n, seeds, k)
    _check_sample_size(pits, par)
    theta, ll = _maximise(pits, par, rng, n_starts, with_jacobian=False)
    return par, theta, ll, schwarz_log_ml(ll, par.dim, pits.T)


def _posterior_mean(par: Parameterization, draws) -> GmcmParams:
    ps = [par.to_params(th) for th in draws]
    p = np.mean([q.weights for q in ps], axis=0)
    mu = np.mean([q.means for q in ps], axis=0)
    if par.rep == "full" or par.G == 1:
        covs = np.mean([q.covs for q in ps], axis=0)
        return GmcmParams(p, mu, covs, par.rep)
    Om1 = np.mean([q.structure.Omega1 for q in ps], axis=0)
    if par.rep == "S1":
        s = S1Params(Om1, np.mean([q.structure.h for q in ps], axis=0), np.mean([q.structure.V for q in ps], axis=0))
        return GmcmParams(p, mu, np.array(expand_s1(s)), "S1", s)
    s = S2Params(Om1, np.mean([q.structure.q for q in ps], axis=0), np.mean([q.structure.D for q in ps], axis=0),
                 par.seeds, par.k)
    return GmcmParams(p, mu, np.array(expand_s2(s)), "S2", s)


def search_s2_seeds(pits: PitPanel, G: int, rng_seed: int, candidates: int, k: int | None = None,
                    executor: Executor | None = None, n_starts: int = 2):
    """Score random projection seeds by Schwarz log marginal likelihood; keep the best.

    Ties go to the lowest candidate index, so the result does not depend on
    the order in which ``executor`` completes tasks.

    Returns:
        (seeds, score)
    """
    if G < 2:
        return (), None
    jobs = [(pits.v, G, rng_seed, c, k, n_starts) for c in range(candidates)]
    results = list(executor.map(_score_s2_candidate, jobs)) if executor else [_score_s2_candidate(j) for j in jobs]
    best_idx, best = None, -np.inf
    for c, score in enumerate(results):
        if score > best:
            best_idx, best = c, score
    if best_idx is None:
        raise RuntimeError("every S2 projection candidate failed")
    return _candidate_seeds(rng_seed, best_idx, G), best


def _candidate_seeds(rng_seed, c, G):
    return tuple(derive_seed(rng_seed, "s2", c, g) for g in range(2, G + 1))


def _score_s2_candidate(job):
    v, G, rng_seed, c, k, n_starts = job
    pits = PitPanel(v)
    try:
        _, _, _, score = fit_mode(pits, G, "S2", stream(rng_seed, "s2-start", c), n_starts,
                                  _candidate_seeds(rng_seed, c, G), k)
    except (RuntimeError, ValueError):
        return -np.inf
    return score


def fit_copula(pits: PitPanel, G: int, representation: str, rng: np.random.Generator,
               config: CopulaFitConfig = CopulaFitConfig(), seeds=None,
               executor: Executor | None = None, prior: CopulaPrior | None = None,
               init: GmcmParams | None = None) -> CopulaFit:
    """Posterior under flat priors (or ``prior``), sampled by MALA from the likelihood mode.

    For S2 without ``seeds`` the projection seeds come from
    :func:`search_s2_seeds` with ``config.s2_candidates`` candidates.
    The point summary averages the natural parameters over retained draws
    (ordering is preserved by averaging).

    ``init`` warm-starts the chain at given parameters and skips the mode
    search; the marginal likelihood fields are then NaN.
    """
    if init is not None:
        if init.G != G or init.representation != representation and G > 1:
            raise ValueError("warm-start parameters do not match G/representation")
        if isinstance(init.structure, S2Params):
            seeds, k = init.structure.seeds, init.structure.k
        else:
            k = config.k
        par = Parameterization(representation, G, pits.n, seeds, k)
        theta_hat, ll, log_ml = par.from_params(init), float("nan"), float("nan")
    else:
        if representation == "S2" and G > 1 and seeds is None:
            seeds, _ = search_s2_seeds(pits, G, int(rng.integers(2 ** 62)), config.s2_candidates,
                                       config.k, executor)
        par, theta_hat, ll, log_ml = fit_mode(pits, G, representation, rng, config.n_starts, seeds, config.k)
    chain = None
    if config.iterations > 0 and par.dim > 0:
        target = copula_target(pits, par, with_jacobian=True, prior=prior)
        start = theta_hat
        if not np.isfinite(target.value_and_grad(start)[0]):
            raise RuntimeError("copula likelihood mode has non-finite posterior density")
        mcfg = MalaConfig(lam=config.lam, burn_in=config.burn_in, iterations=config.iterations,
                          target_acceptance=config.target_acceptance)
        chain = run_mala(target, start, mcfg, rng)
        if chain.acceptance_rate == 0:
            raise RuntimeError("copula chain never moved after burn-in")
        params = _posterior_mean(par, chain.draws)
    else:
        params = par.to_params(theta_hat)
    return CopulaFit(params, log_ml, ll, par, theta_hat, chain)


def select_G(pits: PitPanel, candidates, representation: str = "full", rng: np.random.Generator | None = None,
             n_starts: int = 4, k=None, s2_candidates: int = 10_000):
    """Component count maximising the Schwarz log marginal likelihood; ties go to the smaller G.

    Returns:
        (G, {G: log marginal likelihood})
    """
    candidates = sorted(set(int(g) for g in candidates))
    if not candidates:
        raise ValueError("no candidate component counts")
    rng = rng if rng is not None else np.random.default_rng(0)
    scores = {}
    for G in candidates:
        try:
            if representation == "S2" and G > 1:
                _, scores[G] = search_s2_seeds(pits, G, int(rng.integers(2 ** 62)), s2_candidates, k)
            else:
                scores[G] = fit_mode(pits, G, representation, rng, n_starts, k=k)[3]
        except (RuntimeError, ValueError) as exc:
            logger.warning("copula fit with G=%d failed: %s", G, exc)
    if not scores:
        raise RuntimeError("all copula fits failed")
    best = max(scores.values())
    return min(g for g, s in scores.items() if s == best), scores


# ---------------------------------------------------------------------------
# sampling and joint likelihood

def sample_copula(params: GmcmParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draws of v in (0,1)^n from the copula."""
    comp = rng.choice(params.G, size=size, p=params.weights)
    x = np.empty((size, params.n))
    for g in range(params.G):
        idx = np.flatnonzero(comp == g)
        if idx.size:
            L = np.linalg.cholesky(params.covs[g])
            x[idx] = params.means[g] + rng.standard_normal((idx.size, params.n)) @ L.T
    sd = np.sqrt(np.diagonal(params.covs, axis1=1, axis2=2))
    return np.clip(mixture_cdf(x, params.weights, params.means, sd), PIT_CLIP, 1 - PIT_CLIP)


@dataclass(frozen=True)
class SklarDecomposition:
    total: float
    marginal: np.ndarray  # (T, n)
    copula: np.ndarray  # (T,)


def system_log_likelihood(marginal_logpdf, pits, params: GmcmParams) -> SklarDecomposition:
    """Joint log-likelihood as marginal log densities plus log copula densities."""
    marg = np.asarray(marginal_logpdf, dtype=float)
    v = pits.v if isinstance(pits, PitPanel) else np.asarray(pits, dtype=float)
    cop = gmcm_log_density(v, params)
    return SklarDecomposition(float(marg.sum() + cop.sum()), marg, cop)


def gaussian_marginals(y, loc, scale):
    """Log densities and cdf values of y under independent N(loc, scale^2) marginals."""
    u = (np.asarray(y, dtype=float) - loc) / scale
    return -0.5 * (_LOG_2PI + u ** 2) - np.log(scale), ndtr(u)
