"""Synthetic systems inside the model class, for demos and end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .copula import GmcmParams, sample_copula


@dataclass(frozen=True)
class SyntheticSystem:
    values: np.ndarray  # (T, n)
    beta: np.ndarray  # (T, n) own-lag coefficient of each equation
    h: np.ndarray  # (T, n) log-variances
    names: tuple


def equicorrelation(n: int, rho: float) -> np.ndarray:
    return np.full((n, n), rho) + (1 - rho) * np.eye(n)


def simulate_tvp_system(T: int, n: int, rng: np.random.Generator, copula: GmcmParams | None = None,
                        beta0: float = 0.5, a: float = 0.999, beta_sd: float = 0.01,
                        sv=(0.0, 0.95, 0.05), heteroskedastic: bool = True) -> SyntheticSystem:
    """``y_it = b_it y_i,t-1 + exp(h_it / 2) u_it`` with ``b_it = a b_i,t-1 + N(0, beta_sd^2)``,
    ``h_it = alpha + gamma h_i,t-1 + N(0, delta)`` (held at its mean when not
    heteroskedastic) and ``u_t`` standard-normal margins joined by ``copula``
    (independence when None).
    """
    copula = copula or GmcmParams.gaussian(np.eye(n))
    alpha, gamma, delta = sv
    h_mean = alpha / (1 - gamma)
    y = np.zeros((T, n))
    b = np.full(n, beta0, dtype=float)
    h = np.full(n, h_mean)
    B, H = np.empty((T, n)), np.empty((T, n))
    prev = np.zeros(n)
    u = ndtri(sample_copula(copula, T, rng))
    for t in range(T):
        b = a * b + beta_sd * rng.standard_normal(n)
        if heteroskedastic:
            h = alpha + gamma * h + np.sqrt(delta) * rng.standard_normal(n)
        prev = b * prev + np.exp(0.5 * h) * u[t]
        y[t], B[t], H[t] = prev, b, h
    return SyntheticSystem(y, B, H, tuple(f"y{j + 1}" for j in range(n)))


def quarter_labels(start_year: int, T: int) -> list[str]:
    return [f"{start_year + q // 4}Q{q % 4 + 1}" for q in range(T)]


def write_panel_csv(path, values, names, start_year: int = 1950) -> None:
    values = np.asarray(values, dtype=float)
    lines = ["date," + ",".join(names)]
    for label, row in zip(quarter_labels(start_year, values.shape[0]), values):
        lines.append(label + "," + ",".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
