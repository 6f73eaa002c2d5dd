"""Predictive simulation and forecast scoring.

Forecasts are iterated: each step propagates every equation's coefficients
and log-variance by their laws of motion, draws a dependent uniform vector
from the copula, converts it to standardised innovations, and feeds the new
values back into the lagged regressors.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtri

from .copula import CopulaPrior, GmcmParams, QuantileError, sample_copula
from .equation import EquationPosterior, EquationPrior, EquationSpec

logger = logging.getLogger(__name__)

MIN_DRAWS = 100
POINT_FUNCTIONALS = ("mean", "median")


class ForecastError(RuntimeError):
    pass


@dataclass(frozen=True)
class ForecastSet:
    """Predictive draws at one origin: ``draws[h-1]`` is (n_draws, n)."""

    origin: str
    draws: np.ndarray
    realized: np.ndarray  # (h_max, n); NaN where the future is not observed
    names: tuple = ()
    excluded: int = 0

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float)
        realized = np.asarray(self.realized, dtype=float)
        if draws.ndim != 3:
            raise ValueError("draws must be (h_max, n_draws, n)")
        if draws.shape[1] < MIN_DRAWS:
            raise ValueError(f"need at least {MIN_DRAWS} draws, got {draws.shape[1]}")
        if not np.all(np.isfinite(draws)):
            raise ValueError("forecast draws must be finite")
        if realized.shape != (draws.shape[0], draws.shape[2]):
            raise ValueError("realized values must be (h_max, n)")
        names = tuple(self.names) or tuple(f"y{j + 1}" for j in range(draws.shape[2]))
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "realized", realized)
        object.__setattr__(self, "names", names)

    @property
    def h_max(self) -> int:
        return self.draws.shape[0]

    @property
    def n(self) -> int:
        return self.draws.shape[2]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def point(self, h: int, functional: str = "mean") -> np.ndarray:
        if functional not in POINT_FUNCTIONALS:
            raise ValueError(f"point functional must be one of {POINT_FUNCTIONALS}")
        d = self.draws[h - 1]
        return d.mean(axis=0) if functional == "mean" else np.median(d, axis=0)

    def interval(self, h: int, level: float = 0.9):
        """Equal-tailed predictive interval per variable."""
        a = 0.5 * (1 - level)
        lo, hi = np.quantile(self.draws[h - 1], [a, 1 - a], axis=0)
        return lo, hi

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, origin=np.array(self.origin), draws=self.draws, realized=self.realized,
                     names=np.array(self.names), excluded=np.array(self.excluded))

    @classmethod
    def load(cls, path) -> "ForecastSet":
        with np.load(path, allow_pickle=False) as f:
            return cls(str(f["origin"]), f["draws"], f["realized"], tuple(str(x) for x in f["names"]),
                       int(f["excluded"]))


# ---------------------------------------------------------------------------
# simulation

def _psd_factor(S):
    """Batched symmetric square roots; tolerates singular (e.g. zero) matrices."""
    w, V = np.linalg.eigh(0.5 * (S + np.swapaxes(S, -1, -2)))
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def _lag_regressors(paths, t, spec: EquationSpec, i: int):
    lags = t - 1 - np.arange(spec.p)
    if spec.variant == "own-lags":
        return paths[:, lags, i]
    stacked = paths[:, lags, :].reshape(paths.shape[0], -1)
    return stacked @ spec.compression.Phi.T


@dataclass
class _Group:
    """Forecast draws of one equation that share a posterior (and so a spec)."""

    eq: int
    idx: np.ndarray
    spec: EquationSpec
    beta: np.ndarray
    A: np.ndarray
    chol: np.ndarray
    h: np.ndarray
    sv: np.ndarray


def _candidates(entry):
    if isinstance(entry, EquationPosterior):
        return [1.0], [entry]
    weights, posts = zip(*entry)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("candidate weights must be non-negative with a positive sum")
    return list(w / w.sum()), list(posts)


def _build_groups(posteriors, n_draws, rng):
    groups = []
    for i, entry in enumerate(posteriors):
        weights, posts = _candidates(entry)
        which = rng.choice(len(posts), size=n_draws, p=weights) if len(posts) > 1 else np.zeros(n_draws, int)
        for c, post in enumerate(posts):
            idx = np.flatnonzero(which == c)
            if idx.size == 0:
                continue
            spec = post.spec if post.spec is not None else EquationSpec()
            r = rng.integers(post.draws, size=idx.size)
            groups.append(_Group(i, idx, spec, post.beta_path[r, -1].copy(), post.A_beta[r],
                                 _psd_factor(post.Sigma[r]), post.h[r, -1].copy(), post.sv[r]))
    return groups


def simulate_forecast(posteriors: Sequence, copula: GmcmParams, history, h_max: int, n_draws: int,
                      rng: np.random.Generator, origin: str = "", realized=None, names=(),
                      overflow: float = 1e6) -> ForecastSet:
    """Iterated predictive draws for horizons 1..h_max.

    Args:
        posteriors: per equation either an EquationPosterior or a list of
            (weight, EquationPosterior) pairs averaged over (compression
            candidates); each draw picks a candidate, then a posterior draw.
        copula: dependence of the standardised innovations.
        history: (T, n) values up to and including the origin.
        realized: (h_max, n) future values, NaN where unknown.
        overflow: draws with any |y| above this (or non-finite) are dropped
            and counted in ``ForecastSet.excluded``.
    """
    history = np.asarray(history, dtype=float)
    if history.ndim != 2 or history.shape[1] != len(posteriors):
        raise ValueError("history must be (T, n) with one column per equation")
    if copula.n != len(posteriors):
        raise ValueError("copula dimension differs from the number of equations")
    if h_max < 1:
        raise ValueError("h_max must be at least 1")
    if n_draws < MIN_DRAWS:
        raise ValueError(f"n_draws must be at least {MIN_DRAWS}")
    n = history.shape[1]
    groups = _build_groups(posteriors, n_draws, rng)
    lag_max = max(g.spec.p for g in groups)
    if history.shape[0] < lag_max:
        raise ValueError(f"history has {history.shape[0]} rows, lags need {lag_max}")
    paths = np.empty((n_draws, lag_max + h_max, n))
    paths[:, :lag_max] = history[-lag_max:]
    bad = np.zeros(n_draws, dtype=bool)
    for j in range(h_max):
        t = lag_max + j
        eps = ndtri(sample_copula(copula, n_draws, rng))
        if not np.all(np.isfinite(eps)):
            raise QuantileError("conditional quantile inversion produced non-finite innovations")
        for g in groups:
            k = g.beta.shape[1]
            g.beta = np.einsum("sij,sj->si", g.A, g.beta) + np.einsum("sij,sj->si", g.chol,
                                                                      rng.standard_normal((g.idx.size, k)))
            if g.spec.sv:
                alpha, gamma, delta = g.sv.T
                g.h = alpha + gamma * g.h + np.sqrt(delta) * rng.standard_normal(g.idx.size)
            z = _lag_regressors(paths[g.idx], t, g.spec, g.eq)
            with np.errstate(over="ignore", invalid="ignore"):
                paths[g.idx, t, g.eq] = np.einsum("sk,sk->s", z, g.beta) + np.exp(0.5 * g.h) * eps[g.idx, g.eq]
        with np.errstate(invalid="ignore"):
            step_bad = ~np.all(np.isfinite(paths[:, t]), axis=1) | np.any(np.abs(paths[:, t]) > overflow, axis=1)
        bad |= step_bad
        paths[bad, t] = 0.0  # keeps flagged draws from spreading overflow warnings
    kept = np.flatnonzero(~bad)
    if kept.size < MIN_DRAWS:
        raise ForecastError(f"{bad.sum()} of {n_draws} forecast paths exploded; too few left")
    if bad.any():
        logger.warning("origin %s: %d exploding forecast paths excluded", origin, int(bad.sum()))
    draws = np.transpose(paths[kept, lag_max:], (1, 0, 2))
    if realized is None:
        realized = np.full((h_max, n), np.nan)
    return ForecastSet(origin, draws, realized, tuple(names), int(bad.sum()))


def random_walk_forecast(history, h_max: int, n_draws: int, rng: np.random.Generator, origin: str = "",
                         realized=None, names=()) -> ForecastSet:
    """No-change benchmark: y_{T+h} ~ N(y_T, h S), S the covariance of first differences."""
    history = np.asarray(history, dtype=float)
    if history.shape[0] < 3:
        raise ValueError("random-walk benchmark needs at least 3 observations")
    n = history.shape[1]
    S = np.atleast_2d(np.cov(np.diff(history, axis=0), rowvar=False))
    L = _psd_factor(S)
    steps = rng.standard_normal((h_max, n_draws, n)) @ L.T
    draws = history[-1] + np.cumsum(steps, axis=0)
    if realized is None:
        realized = np.full((h_max, n), np.nan)
    return ForecastSet(origin, draws, realized, tuple(names))


# ---------------------------------------------------------------------------
# scores

def _variable_index(forecast: ForecastSet, variable) -> int:
    if isinstance(variable, (int, np.integer)):
        return int(variable)
    try:
        return forecast.names.index(variable)
    except ValueError:
        raise KeyError(f"unknown variable {variable!r}") from None


def squared_errors(forecasts: Sequence[ForecastSet], variable, h: int, point: str = "mean") -> np.ndarray:
    out = []
    for f in forecasts:
        if h > f.h_max:
            continue
        j = _variable_index(f, variable)
        y = f.realized[h - 1, j]
        if np.isfinite(y):
            out.append((f.point(h, point)[j] - y) ** 2)
    return np.array(out)


def msfe(forecasts: Sequence[ForecastSet], variable, h: int, point: str = "mean") -> float:
    """Mean over origins of the squared point-forecast error at horizon ``h``."""
    err = squared_errors(forecasts, variable, h, point)
    if err.size == 0:
        raise ValueError(f"no origin has a realized value at h={h}")
    return float(err.mean())


def log_predictive_likelihood(forecast: ForecastSet, h: int, variables=None) -> float:
    """Log of a Gaussian-kernel density estimate (Scott bandwidth) of the
    predictive density at the realized vector."""
    cols = list(range(forecast.n)) if variables is None else \
        [_variable_index(forecast, v) for v in np.atleast_1d(variables)]
    y = forecast.realized[h - 1, cols]
    if not np.all(np.isfinite(y)):
        raise ValueError(f"no realized value at h={h}")
    d = forecast.draws[h - 1][:, cols]
    try:
        kde = stats.gaussian_kde(d.T)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ValueError(f"degenerate predictive draw cloud at h={h}: {exc}") from exc
    val = float(kde.logpdf(y.reshape(-1, 1))[0])
    if not np.isfinite(val):
        raise ValueError(f"degenerate predictive draw cloud at h={h}")
    return val


def interval_coverage(forecasts: Sequence[ForecastSet], h: int, level: float = 0.9) -> float:
    """Share of realized values (over origins and variables) inside the equal-tailed interval."""
    hits, total = 0, 0
    for f in forecasts:
        if h > f.h_max:
            continue
        y = f.realized[h - 1]
        ok = np.isfinite(y)
        lo, hi = f.interval(h, level)
        hits += int(np.sum((y >= lo) & (y <= hi) & ok))
        total += int(ok.sum())
    if total == 0:
        raise ValueError(f"no realized values at h={h}")
    return hits / total


@dataclass
class ScoreTable:
    """MSFE per (variable, horizon); optional benchmark MSFE and summed log predictive likelihood."""

    variant: str
    variables: tuple
    horizons: tuple
    msfe: np.ndarray  # (n_variables, n_horizons)
    log_pl: np.ndarray | None = None  # (n_horizons,) sum over origins
    benchmark_msfe: np.ndarray | None = None
    origins: np.ndarray | None = field(default=None, repr=False)  # origins scored per horizon

    @property
    def ratios(self) -> np.ndarray:
        if self.benchmark_msfe is None:
            raise ValueError("no benchmark attached; use relative_msfe")
        return self.msfe / self.benchmark_msfe


def score_forecasts(forecasts: Sequence[ForecastSet], variant: str, h_max: int | None = None,
                    point: str = "mean", with_log_pl: bool = True) -> ScoreTable:
    if not forecasts:
        raise ValueError("no forecasts to score")
    names = forecasts[0].names
    h_max = h_max or max(f.h_max for f in forecasts)
    H = tuple(range(1, h_max + 1))
    table = np.full((len(names), h_max), np.nan)
    counts = np.zeros(h_max, dtype=int)
    lpl = np.full(h_max, np.nan) if with_log_pl else None
    for h in H:
        for j in range(len(names)):
            err = squared_errors(forecasts, j, h, point)
            if err.size:
                table[j, h - 1] = err.mean()
                counts[h - 1] = err.size
        if with_log_pl:
            vals = [log_predictive_likelihood(f, h) for f in forecasts
                    if h <= f.h_max and np.all(np.isfinite(f.realized[h - 1]))]
            if vals:
                lpl[h - 1] = math.fsum(vals)
    return ScoreTable(variant, names, H, table, lpl, None, counts)


def relative_msfe(model: ScoreTable, benchmark: ScoreTable) -> ScoreTable:
    """Copy of ``model`` carrying the benchmark MSFE; ``.ratios`` is model / benchmark."""
    if tuple(model.variables) != tuple(benchmark.variables) or tuple(model.horizons) != tuple(benchmark.horizons):
        raise ValueError("model and benchmark tables cover different variables or horizons")
    bench = np.asarray(benchmark.msfe, dtype=float)
    if np.any(bench == 0):
        raise ValueError("benchmark MSFE has a zero cell")
    return ScoreTable(model.variant, model.variables, model.horizons, model.msfe, model.log_pl, bench,
                      model.origins)


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(x) -> str:
    return repr(float(x))


def write_score_csv(path, tables: Sequence[ScoreTable], quantity: str = "ratio") -> None:
    """Rows = (variant, variable), columns h1..hH. ``quantity`` is ratio, msfe or log_pl."""
    if quantity not in ("ratio", "msfe", "log_pl"):
        raise ValueError("quantity must be ratio, msfe or log_pl")
    H = tables[0].horizons
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "variable"] + [f"h{h}" for h in H])
        for t in tables:
            if tuple(t.horizons) != tuple(H):
                raise ValueError("all tables must share the horizon grid")
            if quantity == "log_pl":
                w.writerow([t.variant, "joint"] + [_fmt(x) for x in t.log_pl])
                continue
            vals = t.ratios if quantity == "ratio" else t.msfe
            for name, row in zip(t.variables, vals):
                w.writerow([t.variant, name] + [_fmt(x) for x in row])


def read_score_csv(path) -> list[ScoreTable]:
    """Read MSFE tables in the layout of :func:`write_score_csv` (one table per variant)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["variant", "variable"]:
        raise ValueError(f"{path}: header must start with variant,variable")
    try:
        H = tuple(int(c[1:]) for c in rows[0][2:])
    except ValueError:
        raise ValueError(f"{path}: horizon columns must be named h1, h2, ...") from None
    by_variant: dict = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} fields")
        try:
            vals = [float(x) for x in row[2:]]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric score") from None
        by_variant.setdefault(row[0], []).append((row[1], vals))
    return [ScoreTable(v, tuple(n for n, _ in items), H, np.array([x for _, x in items]))
            for v, items in by_variant.items()]


def write_histogram_csv(path, values, bins: int = 20) -> None:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("no finite values to histogram")
    counts, edges = np.histogram(values, bins=bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([_fmt(a), _fmt(b), int(c)])


# ---------------------------------------------------------------------------
# prior sensitivity

@dataclass(frozen=True)
class SensitivityHyper:
    """Hyperparameters from which replicate priors are sampled."""

    b_mean: float = 0.0
    b_var: float = 10.0
    r_mean: float = 0.0
    r_var: float = 100.0
    m_mean: float = 0.0
    m_var: float = 10.0
    c_mean: float = 0.0
    c_var: float = 100.0


@dataclass(frozen=True)
class SensitivityPrior:
    equations: tuple  # EquationPrior per equation (or per equation and compression candidate)
    copula: dict  # component count -> CopulaPrior


def mixture_weights_from_r(r) -> np.ndarray:
    """p_g proportional to exp(-r_g^2)."""
    a = -np.asarray(r, dtype=float) ** 2
    a = a - a.max()
    w = np.exp(a)
    return w / w.sum()


def draw_sensitivity_prior(rng: np.random.Generator, ks: Sequence[int], G, n: int,
                           hyper: SensitivityHyper = SensitivityHyper()) -> SensitivityPrior:
    """One replicate prior.

    Coefficient priors N(b, b_var) get centres b ~ N(b_mean, b_var) per element of
    (vec A, beta_0). For the copula, r_g ~ N(r_mean, r_var) fixes centre weights
    (sorted ascending to respect the ordering); mu_g and vech(C_g) get N(m, m_var)
    and N(c, c_var) priors with centres drawn from those same laws. ``G`` may
    be a list of component counts; each gets its own copula prior.
    """
    eqs = []
    for k in ks:
        sd = math.sqrt(hyper.b_var)
        eqs.append(EquationPrior(coef_mean=rng.normal(hyper.b_mean, sd, k * k), coef_var=hyper.b_var,
                                 beta0_mean=rng.normal(hyper.b_mean, sd, k), beta0_var=hyper.b_var))
    cops = {}
    for g in sorted(set(int(x) for x in np.atleast_1d(G))):
        p = np.sort(mixture_weights_from_r(rng.normal(hyper.r_mean, math.sqrt(hyper.r_var), g)))
        cops[g] = CopulaPrior(
            log_weight_center=np.log(np.clip(p, 1e-300, None)), weight_var=hyper.r_var,
            mean_center=rng.normal(hyper.m_mean, math.sqrt(hyper.m_var), (g, n)), mean_var=hyper.m_var,
            chol_center=rng.normal(hyper.c_mean, math.sqrt(hyper.c_var), (g, n * (n + 1) // 2)),
            chol_var=hyper.c_var,
        )
    return SensitivityPrior(tuple(eqs), cops)


def prior_sensitivity(evaluate: Callable[[SensitivityPrior | None], np.ndarray], n_priors: int,
                      rng: np.random.Generator, ks: Sequence[int], G, n: int,
                      hyper: SensitivityHyper = SensitivityHyper(), benchmark_only: bool = False,
                      executor: Executor | None = None) -> np.ndarray:
    """Relative-MSFE arrays for ``n_priors`` sampled priors, stacked on axis 0.

    ``evaluate(prior)`` re-runs the warm-started chains under ``prior`` and
    returns the ratio table; ``None`` stands for the benchmark prior, which
    ``benchmark_only`` uses for every replicate.
    """
    if n_priors < 1:
        raise ValueError("n_priors must be at least 1")
    priors = [None if benchmark_only else draw_sensitivity_prior(rng, ks, G, n, hyper) for _ in range(n_priors)]
    results = list(executor.map(evaluate, priors)) if executor else [evaluate(p) for p in priors]
    return np.stack([np.asarray(r, dtype=float) for r in results])
