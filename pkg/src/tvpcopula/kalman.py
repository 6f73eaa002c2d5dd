"""Linear-Gaussian state-space engine.

State and observation equations, for periods ``t = 0, ..., T-1``::

    x_0 ~ N(init_mean, init_cov)
    x_t = A_t x_{t-1} + w_t,    w_t ~ N(0, Q_t),   t >= 1
    y_t = Z_t x_t + v_t,        v_t ~ N(0, R_t)

``A_0`` and ``Q_0`` are never used. A row of ``y`` that is entirely NaN is
treated as missing and skips the measurement update, which is how a
pre-sample state (e.g. a coefficient vector at time zero) is carried along.

The recursions run in numba kernels; the Python layer only validates and
broadcasts inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)
PSD_TOL = 1e-10


class IllPosedModelError(ValueError):
    """Raised when an innovation covariance is singular or inputs are non-finite."""


def _sym_psd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    mat = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    if not np.all(np.isfinite(mat)):
        raise IllPosedModelError(f"{name} has non-finite entries")
    w, v = np.linalg.eigh(mat)
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if np.min(w, initial=0.0) < -PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {w.min():.3g})")
    if np.min(w, initial=0.0) < 0.0:
        w = np.clip(w, 0.0, None)
        mat = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
        mat = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    return mat


@dataclass(frozen=True)
class LinearGaussianSSM:
    """Time-varying linear-Gaussian state-space model.

    Each system matrix is either constant (2-D) or given per period (3-D with
    a leading time axis of length ``T``).
    """

    transition: np.ndarray
    state_cov: np.ndarray
    loading: np.ndarray
    obs_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    state_dim: int = field(init=False)
    obs_dim: int = field(init=False)

    def __post_init__(self):
        A = np.asarray(self.transition, dtype=float)
        Z = np.asarray(self.loading, dtype=float)
        k = A.shape[-1]
        p = Z.shape[-2]
        m0 = np.asarray(self.init_mean, dtype=float).reshape(-1)
        object.__setattr__(self, "transition", A)
        object.__setattr__(self, "loading", Z)
        object.__setattr__(self, "state_cov", _sym_psd(self.state_cov, "state_cov"))
        object.__setattr__(self, "obs_cov", _sym_psd(self.obs_cov, "obs_cov"))
        object.__setattr__(self, "init_mean", m0)
        object.__setattr__(self, "init_cov", _sym_psd(self.init_cov, "init_cov"))
        object.__setattr__(self, "state_dim", k)
        object.__setattr__(self, "obs_dim", p)
        if A.shape[-2:] != (k, k):
            raise ValueError(f"transition must be square, got {A.shape}")
        if Z.shape[-1] != k:
            raise ValueError(f"loading has {Z.shape[-1]} columns, state_dim is {k}")
        if self.state_cov.shape[-2:] != (k, k):
            raise ValueError("state_cov dimension mismatch")
        if self.obs_cov.shape[-2:] != (p, p):
            raise ValueError("obs_cov dimension mismatch")
        if m0.shape != (k,) or self.init_cov.shape != (k, k):
            raise ValueError("initial moments dimension mismatch")
        for name in ("transition", "state_cov", "loading", "obs_cov"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise IllPosedModelError(f"{name} has non-finite entries")

    @property
    def horizon(self) -> int | None:
        """Number of periods fixed by per-period matrices, or None if all constant."""
        for mat in (self.transition, self.state_cov, self.loading, self.obs_cov):
            if mat.ndim == 3:
                return mat.shape[0]
        return None

    def expanded(self, T: int):
        """Per-period copies of all system matrices, shape ``(T, ., .)``."""
        out = []
        for mat in (self.transition, self.state_cov, self.loading, self.obs_cov):
            if mat.ndim == 2:
                mat = np.broadcast_to(mat, (T,) + mat.shape)
            elif mat.shape[0] != T:
                raise ValueError(f"per-period matrices have length {mat.shape[0]}, observations {T}")
            out.append(np.ascontiguousarray(mat, dtype=float))
        return tuple(out)


@dataclass(frozen=True)
class FilterOutput:
    pred_mean: np.ndarray  # (T, k): E[x_t | y_{0:t-1}]
    pred_cov: np.ndarray  # (T, k, k)
    filt_mean: np.ndarray  # (T, k): E[x_t | y_{0:t}]
    filt_cov: np.ndarray
    loglik_increments: np.ndarray  # (T,), zero for missing rows

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_increments))


# ---------------------------------------------------------------------------
# numba kernels

@numba.njit(cache=True)
def _psd_sqrt(S, scale):
    # symmetric square root; eigenvalues below round-off relative to `scale`
    # are null directions and get no noise
    w, v = np.linalg.eigh(0.5 * (S + S.T))
    tol = 1e-11 * scale
    for i in range(w.shape[0]):
        w[i] = np.sqrt(w[i]) if w[i] > tol else 0.0
    return v * w


@numba.njit(cache=True)
def _cov_scale(P):
    s = 0.0
    for i in range(P.shape[0]):
        s = max(s, abs(P[i, i]))
    return s


@numba.njit(cache=True)
def _chol(A, scale):
    # lower Cholesky factor by hand (tiny matrices); ok=False when a pivot is
    # not clearly positive relative to `scale`
    k = A.shape[0]
    L = np.zeros((k, k))
    tol = 1e-11 * scale
    for j in range(k):
        d = A[j, j]
        for m in range(j):
            d -= L[j, m] * L[j, m]
        if not d > tol:
            return L, False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, k):
            v = A[i, j]
            for m in range(j):
                v -= L[i, m] * L[j, m]
            L[i, j] = v / L[j, j]
    return L, True


@numba.njit(cache=True)
def _chol_solve(L, B):
    # solve (L L') X = B
    k, c = B.shape
    X = B.copy()
    for col in range(c):
        for i in range(k):
            v = X[i, col]
            for m in range(i):
                v -= L[i, m] * X[m, col]
            X[i, col] = v / L[i, i]
        for i in range(k - 1, -1, -1):
            v = X[i, col]
            for m in range(i + 1, k):
                v -= L[m, i] * X[m, col]
            X[i, col] = v / L[i, i]
    return X


@numba.njit(cache=True)
def _noise_factor(C, scale):
    L, ok = _chol(0.5 * (C + C.T), scale)
    if ok:
        return L
    return _psd_sqrt(C, scale)


@numba.njit(cache=True)
def _mm(A, B):
    n, k = A.shape
    c = B.shape[1]
    out = np.zeros((n, c))
    for i in range(n):
        for m in range(k):
            a = A[i, m]
            if a != 0.0:
                for j in range(c):
                    out[i, j] += a * B[m, j]
    return out


@numba.njit(cache=True)
def _mm_t(A, B):
    # A @ B.T
    n, k = A.shape
    c = B.shape[0]
    out = np.zeros((n, c))
    for i in range(n):
        for j in range(c):
            v = 0.0
            for m in range(k):
                v += A[i, m] * B[j, m]
            out[i, j] = v
    return out


@numba.njit(cache=True)
def _mv(A, x):
    n, k = A.shape
    out = np.zeros(n)
    for i in range(n):
        v = 0.0
        for m in range(k):
            v += A[i, m] * x[m]
        out[i] = v
    return out


@numba.njit(cache=True)
def _symmetrise(M):
    k = M.shape[0]
    for i in range(k):
        for j in range(i + 1, k):
            v = 0.5 * (M[i, j] + M[j, i])
            M[i, j] = v
            M[j, i] = v


@numba.njit(cache=True)
def _filter_kernel(y, A, Q, Z, R, m0, P0):
    T, p = y.shape
    k = m0.shape[0]
    a = np.empty((T, k))
    Pp = np.empty((T, k, k))
    m = np.empty((T, k))
    P = np.empty((T, k, k))
    ll = np.zeros(T)
    eye = np.eye(k)
    status = 0
    for t in range(T):
        if t == 0:
            at = m0.copy()
            Pt = P0.copy()
        else:
            at = _mv(A[t], m[t - 1])
            Pt = _mm_t(_mm(A[t], P[t - 1]), A[t]) + Q[t]
        _symmetrise(Pt)
        a[t] = at
        Pp[t] = Pt
        missing = True
        for j in range(p):
            if not np.isnan(y[t, j]):
                missing = False
        if missing:
            m[t] = at
            P[t] = Pt
            continue
        for j in range(p):
            if np.isnan(y[t, j]):
                return a, Pp, m, P, ll, 2
        if p == 1:
            # scalar innovation: no factorisations needed
            z = Z[t, 0]
            Pz = _mv(Pt, z)
            S = R[t, 0, 0]
            e = y[t, 0]
            for i in range(k):
                S += z[i] * Pz[i]
                e -= z[i] * at[i]
            if not S > 1e-300:
                return a, Pp, m, P, ll, 1
            K = Pz / S
            mt = at + K * e
            # Joseph form: (I - K z') P (I - K z')' + K K' r
            IKZ = eye.copy()
            for i in range(k):
                for j in range(k):
                    IKZ[i, j] -= K[i] * z[j]
            Pn = _mm_t(_mm(IKZ, Pt), IKZ)
            r = R[t, 0, 0]
            for i in range(k):
                for j in range(k):
                    Pn[i, j] += K[i] * K[j] * r
            _symmetrise(Pn)
            m[t] = mt
            P[t] = Pn
            ll[t] = -0.5 * (np.log(2.0 * np.pi) + np.log(S) + e * e / S)
            continue
        ZP = Z[t] @ Pt
        S = ZP @ Z[t].T + R[t]
        S = 0.5 * (S + S.T)
        w = np.linalg.eigvalsh(S)
        if w[0] <= 1e-300 or w[0] <= 1e-13 * w[-1]:
            return a, Pp, m, P, ll, 1
        L = np.linalg.cholesky(S)
        e = y[t] - Z[t] @ at
        # K = P Z' S^{-1}
        Sinv = np.linalg.inv(S)
        K = ZP.T @ Sinv
        m[t] = at + K @ e
        IKZ = eye - K @ Z[t]
        Pn = IKZ @ Pt @ IKZ.T + K @ R[t] @ K.T
        P[t] = 0.5 * (Pn + Pn.T)
        logdet = 0.0
        for j in range(p):
            logdet += 2.0 * np.log(L[j, j])
        ll[t] = -0.5 * (p * np.log(2.0 * np.pi) + logdet + e @ Sinv @ e)
    return a, Pp, m, P, ll, status


@numba.njit(cache=True)
def _smoother_gain(Pt, At1, Ppt1):
    # J = P A' Pp^{-1}, via Cholesky when Pp is clearly PD
    L, ok = _chol(Ppt1, _cov_scale(Ppt1))
    if ok:
        return np.ascontiguousarray(_chol_solve(L, _mm(At1, Pt)).T)
    return Pt @ At1.T @ np.linalg.pinv(Ppt1)


@numba.njit(cache=True)
def _backward_sample_kernel(A, m, P, Pp, eps):
    T, k = m.shape
    x = np.empty((T, k))
    x[T - 1] = m[T - 1] + _mv(_noise_factor(P[T - 1], _cov_scale(P[T - 1])), eps[T - 1])
    for t in range(T - 2, -1, -1):
        J = _smoother_gain(P[t], A[t + 1], Pp[t + 1])
        dev = x[t + 1] - _mv(A[t + 1], m[t])
        mean = m[t] + _mv(J, dev)
        C = P[t] - _mm(_mm(J, A[t + 1]), P[t])
        x[t] = mean + _mv(_noise_factor(C, _cov_scale(P[t])), eps[t])
    return x


@numba.njit(cache=True)
def _rts_kernel(A, m, P, Pp):
    T, k = m.shape
    ms = np.empty((T, k))
    Ps = np.empty((T, k, k))
    ms[T - 1] = m[T - 1]
    Ps[T - 1] = P[T - 1]
    for t in range(T - 2, -1, -1):
        J = _smoother_gain(P[t], A[t + 1], Pp[t + 1])
        ms[t] = m[t] + J @ (ms[t + 1] - A[t + 1] @ m[t])
        C = P[t] + J @ (Ps[t + 1] - Pp[t + 1]) @ J.T
        Ps[t] = 0.5 * (C + C.T)
    return ms, Ps


# ---------------------------------------------------------------------------

def _prepare(model: LinearGaussianSSM, obs):
    y = np.asarray(obs, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != model.obs_dim:
        raise ValueError(f"observations have {y.shape[1]} columns, model obs_dim is {model.obs_dim}")
    if np.any(np.isinf(y)):
        raise IllPosedModelError("observations contain infinite values")
    T = y.shape[0]
    if model.horizon is not None and model.horizon != T:
        raise ValueError(f"model horizon {model.horizon} does not match {T} observations")
    A, Q, Z, R = model.expanded(T)
    return np.ascontiguousarray(y), A, Q, Z, R


def _run_filter(model, obs):
    y, A, Q, Z, R = _prepare(model, obs)
    a, Pp, m, P, ll, status = _filter_kernel(y, A, Q, Z, R, model.init_mean, model.init_cov)
    if status == 1:
        raise IllPosedModelError("singular innovation covariance")
    if status == 2:
        raise IllPosedModelError("partially missing observation rows are not supported")
    return FilterOutput(a, Pp, m, P, ll), A


def kalman_filter(model: LinearGaussianSSM, obs) -> FilterOutput:
    """Run the Kalman filter and return moments and the exact Gaussian log-likelihood.

    Covariances are updated in Joseph form. Rows of ``obs`` that are all NaN
    are skipped.
    """
    out, _ = _run_filter(model, obs)
    return out


def smooth(model: LinearGaussianSSM, obs):
    """Rauch-Tung-Striebel smoothed means and covariances, shapes (T, k) and (T, k, k)."""
    out, A = _run_filter(model, obs)
    return _rts_kernel(A, out.filt_mean, out.filt_cov, out.pred_cov)


def simulation_smoother(model: LinearGaussianSSM, obs, rng: np.random.Generator,
                        return_filter: bool = False):
    """Draw a state path from p(x_{0:T-1} | y) by forward filtering, backward sampling.

    Null directions of the conditional covariances receive no noise, so a
    model with ``Q = 0`` yields the smoothed path exactly.

    Returns:
        (T, k) array, or ``(path, FilterOutput)`` if ``return_filter``.
    """
    out, A = _run_filter(model, obs)
    eps = rng.standard_normal(out.filt_mean.shape)
    path = _backward_sample_kernel(A, out.filt_mean, out.filt_cov, out.pred_cov, eps)
    if return_filter:
        return path, out
    return path
