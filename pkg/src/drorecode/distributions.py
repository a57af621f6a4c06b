"""Rank distributions, 1-Wasserstein distance and Monte Carlo radius calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_MC_SAMPLES = 10_000


def as_distribution(h, atol: float = 1e-12) -> np.ndarray:
    """Validate a probability vector over ranks 0..M and return it as a float array."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("rank distribution must be a non-empty vector")
    if np.any(h < 0) or not np.all(np.isfinite(h)):
        raise ValueError("rank distribution has negative or non-finite entries")
    if abs(h.sum() - 1.0) > atol:
        raise ValueError(f"rank distribution sums to {h.sum()!r}, not 1")
    return h


def as_samples(samples, M: int) -> np.ndarray:
    s = np.asarray(samples)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("need at least one rank sample")
    if not np.issubdtype(s.dtype, np.integer):
        if not np.all(np.equal(np.mod(s, 1), 0)):
            raise ValueError("rank samples must be integers")
        s = s.astype(int)
    if s.min() < 0 or s.max() > M:
        raise ValueError(f"rank samples must lie in [0, {M}]")
    return s


def empirical(samples, M: int) -> np.ndarray:
    """Empirical rank distribution of the observed samples."""
    s = as_samples(samples, M)
    return np.bincount(s, minlength=M + 1) / s.size


def wasserstein(h1, h2) -> float:
    """1-Wasserstein distance on the unit-spaced support 0..M (L1 distance of CDFs)."""
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    if h1.shape != h2.shape:
        raise ValueError(f"support size mismatch: {h1.shape} vs {h2.shape}")
    return float(np.abs(np.cumsum(h1 - h2)[:-1]).sum())


def multinomial_covariance(h) -> np.ndarray:
    """Covariance of a single multinomial draw: diag(h) - h h^T."""
    h = np.asarray(h, dtype=float)
    return np.diag(h) - np.outer(h, h)


def covariance_factor(h) -> np.ndarray:
    """Symmetric square root of the multinomial covariance.

    The root is taken on the support of ``h`` only, negative eigenvalues
    from round-off are clamped to zero, and rows and columns are centred.
    The all-ones vector spans the null space of the covariance, so the
    centring changes nothing in exact arithmetic; it keeps the square root
    of a rounding-level eigenvalue from giving draws a nonzero sum.
    """
    h = np.asarray(h, dtype=float)
    S = np.flatnonzero(h > 0)
    F = np.zeros((h.size, h.size))
    if S.size < 2:
        return F
    w, V = np.linalg.eigh(multinomial_covariance(h[S] / h[S].sum()))
    R = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    R -= R.mean(axis=0, keepdims=True)
    R -= R.mean(axis=1, keepdims=True)
    F[np.ix_(S, S)] = R
    return F


def limit_statistic(G: np.ndarray) -> np.ndarray:
    """max over 1-Lipschitz u of G^T u, for G with zero-sum rows.

    Summation by parts turns the maximum into sum_k |G_0 + ... + G_k| over
    k = 0..M-1.  Accepts a single vector or a stack of row vectors.
    """
    S = np.cumsum(G, axis=-1)[..., :-1]
    return np.abs(S).sum(axis=-1)


def limit_statistic_sample(h, rng: np.random.Generator, size: int | None = None,
                           factor: np.ndarray | None = None):
    """Draw the limiting statistic X with G ~ N(0, Sigma(h))."""
    if factor is None:
        factor = covariance_factor(h)
    n = 1 if size is None else size
    G = rng.standard_normal((n, factor.shape[0])) @ factor
    X = limit_statistic(G)
    return float(X[0]) if size is None else X


def quantile_level(eta: float) -> float:
    """Quantile level used for calibration; ``eta`` and ``1 - eta`` are read as the same confidence."""
    return max(eta, 1.0 - eta)


def order_statistic_quantile(draws: np.ndarray, q: float) -> float:
    """Empirical q-quantile as the ceil(L*q)-th order statistic (1-based)."""
    L = len(draws)
    k = min(max(math.ceil(L * q), 1), L)
    return float(np.partition(np.asarray(draws, dtype=float), k - 1)[k - 1])


@dataclass
class RadiusCalibration:
    eta: float
    L: int
    rho: float
    quantile: float
    N: int
    quantile_samples: np.ndarray | None = None


def calibrate_radius(h_emp, N: int, eta: float = 0.95, L: int = DEFAULT_MC_SAMPLES,
                     rng: np.random.Generator | None = None, keep_samples: bool = False) -> RadiusCalibration:
    """Wasserstein radius from the Monte Carlo quantile of the limiting statistic.

    The covariance is estimated from ``h_emp``; the radius is the empirical
    quantile divided by sqrt(N).
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if L < 1:
        raise ValueError("need at least one Monte Carlo draw")
    if N < 1:
        raise ValueError("sample size must be positive")
    h_emp = as_distribution(h_emp)
    rng = np.random.default_rng() if rng is None else rng
    draws = limit_statistic_sample(h_emp, rng, size=L)
    q = order_statistic_quantile(draws, quantile_level(eta))
    return RadiusCalibration(eta=eta, L=L, rho=q / math.sqrt(N), quantile=q, N=N,
                             quantile_samples=draws if keep_samples else None)
