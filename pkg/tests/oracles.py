"""Brute-force reference computations shared by the tests.

Nothing here calls into the recursive code paths under test.
"""

import numpy as np
from scipy import stats


def dense_state_space_moments(A, Q, Z, R, m0, P0):
    """Joint mean/covariance of stacked states x_{0:T-1} and observations y_{0:T-1}.

    Matrices are per-period arrays with a leading time axis.
    """
    T, k = A.shape[0], A.shape[1]
    p = Z.shape[1]
    # x = M (x0_dev, w_1..w_{T-1}) + mean, built by explicit propagation
    F = np.zeros((T * k, T * k))  # maps stacked innovations to stacked states
    for t in range(T):
        for s in range(t + 1):
            block = np.eye(k)
            for u in range(s + 1, t + 1):
                block = A[u] @ block
            F[t * k:(t + 1) * k, s * k:(s + 1) * k] = block
    noise_cov = np.zeros((T * k, T * k))
    noise_cov[:k, :k] = P0
    for t in range(1, T):
        noise_cov[t * k:(t + 1) * k, t * k:(t + 1) * k] = Q[t]
    mean_x = np.zeros(T * k)
    mean_x[:k] = m0
    for t in range(1, T):
        mean_x[t * k:(t + 1) * k] = A[t] @ mean_x[(t - 1) * k:t * k]
    cov_x = F @ noise_cov @ F.T
    H = np.zeros((T * p, T * k))
    Rbig = np.zeros((T * p, T * p))
    for t in range(T):
        H[t * p:(t + 1) * p, t * k:(t + 1) * k] = Z[t]
        Rbig[t * p:(t + 1) * p, t * p:(t + 1) * p] = R[t]
    mean_y = H @ mean_x
    cov_y = H @ cov_x @ H.T + Rbig
    cov_xy = cov_x @ H.T
    return mean_x, cov_x, mean_y, cov_y, cov_xy


def dense_loglik(y, A, Q, Z, R, m0, P0):
    _, _, mean_y, cov_y, _ = dense_state_space_moments(A, Q, Z, R, m0, P0)
    return stats.multivariate_normal(mean_y, cov_y).logpdf(np.asarray(y).reshape(-1))


def dense_posterior(y, A, Q, Z, R, m0, P0):
    """Exact conditional mean and covariance of stacked states given all observations."""
    mean_x, cov_x, mean_y, cov_y, cov_xy = dense_state_space_moments(A, Q, Z, R, m0, P0)
    gain = np.linalg.solve(cov_y, cov_xy.T).T
    mean = mean_x + gain @ (np.asarray(y).reshape(-1) - mean_y)
    cov = cov_x - gain @ cov_xy.T
    return mean, 0.5 * (cov + cov.T)


def random_model(rng, k, p, T):
    """A random stable time-varying model, returned as per-period arrays."""
    A = np.empty((T, k, k))
    Q = np.empty((T, k, k))
    Z = rng.normal(size=(T, p, k))
    R = np.empty((T, p, p))
    for t in range(T):
        M = rng.normal(size=(k, k))
        A[t] = 0.8 * M / max(1.0, np.max(np.abs(np.linalg.eigvals(M))))
        B = rng.normal(size=(k, k))
        Q[t] = 0.3 * B @ B.T + 0.1 * np.eye(k)
        C = rng.normal(size=(p, p))
        R[t] = 0.2 * C @ C.T + 0.2 * np.eye(p)
    m0 = rng.normal(size=k)
    B = rng.normal(size=(k, k))
    P0 = B @ B.T + 0.5 * np.eye(k)
    return A, Q, Z, R, m0, P0


def ln_chi2_1_moments():
    """Mean and variance of log(X), X ~ chi2(1), by numerical quadrature of its density."""
    from scipy import integrate

    def dens(z):
        # density of log(X): f_X(e^z) e^z
        return stats.chi2(1).pdf(np.exp(z)) * np.exp(z)

    m1 = integrate.quad(lambda z: z * dens(z), -60, 10, limit=400)[0]
    m2 = integrate.quad(lambda z: z * z * dens(z), -60, 10, limit=400)[0]
    return m1, m2 - m1 ** 2


def gaussian_copula_logpdf(v, corr):
    """Closed-form Gaussian copula log-density."""
    x = stats.norm.ppf(v)
    corr = np.asarray(corr)
    inv = np.linalg.inv(corr)
    _, logdet = np.linalg.slogdet(corr)
    quad = np.einsum("...i,ij,...j->...", x, inv - np.eye(len(corr)), x)
    return -0.5 * logdet - 0.5 * quad
