"""Expected-rank model for batches crossing an independent packet-loss link.

A batch of rank ``r`` for which ``t`` recoded packets are sent arrives at the
next node with rank ``min(r, K)`` where ``K ~ Binom(t, 1 - p)`` is the number
of packets that survive the link (large-field approximation).  Non-integer
``t`` means ``floor(t) + 1`` packets with probability ``t - floor(t)`` and
``floor(t)`` packets otherwise.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_BATCH_SIZE = 256
DEFAULT_EPSILON = 1e-9
DEFAULT_HARD_CAP = 128


@dataclass(frozen=True)
class ChannelModel:
    """Independent packet loss link with loss rate ``loss_rate`` and batch size ``M``."""

    loss_rate: float
    batch_size: int

    def __post_init__(self):
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError(f"loss rate must lie in [0, 1), got {self.loss_rate}")
        if not 1 <= self.batch_size <= MAX_BATCH_SIZE:
            raise ValueError(f"batch size must lie in [1, {MAX_BATCH_SIZE}], got {self.batch_size}")

    @property
    def M(self) -> int:
        return self.batch_size


@functools.lru_cache(maxsize=4096)
def binomial_pmf(n: int, q: float) -> np.ndarray:
    """pmf of Binom(n, q) on 0..n by direct evaluation (cached, read-only)."""
    k = np.arange(n + 1)
    coef = np.array([math.comb(n, int(i)) for i in k], dtype=float)
    # 0.0**0 == 1.0, so q in {0, 1} is handled without special cases
    pmf = coef * np.power(q, k) * np.power(1.0 - q, n - k)
    pmf.flags.writeable = False
    return pmf


def _check_rank(model: ChannelModel, r: int) -> None:
    if not 0 <= r <= model.M:
        raise ValueError(f"rank {r} outside [0, {model.M}]")


def expected_rank_integer(model: ChannelModel, r: int, t: int) -> float:
    """E_r(t) for an integer number of transmitted packets."""
    _check_rank(model, r)
    if t < 0:
        raise ValueError(f"negative packet count {t}")
    t = int(t)
    pmf = binomial_pmf(t, 1.0 - model.loss_rate)
    return float(np.dot(pmf, np.minimum(np.arange(t + 1), r)))


def expected_rank(model: ChannelModel, r: int, t: float) -> float:
    """E_r(t) with the randomized meaning of fractional ``t``."""
    if t < 0:
        raise ValueError(f"negative packet count {t}")
    lo = math.floor(t)
    frac = t - lo
    value = (1.0 - frac) * expected_rank_integer(model, r, lo)
    if frac > 0.0:
        value += frac * expected_rank_integer(model, r, lo + 1)
    return value


def rank_transition(model: ChannelModel, r: int, t: float) -> np.ndarray:
    """Distribution over 0..M of the rank at the next node.

    The mean of the returned vector equals ``expected_rank(model, r, t)``.
    """
    _check_rank(model, r)
    if t < 0:
        raise ValueError(f"negative packet count {t}")
    lo = math.floor(t)
    frac = t - lo
    out = (1.0 - frac) * _integer_transition(model, r, lo)
    if frac > 0.0:
        out += frac * _integer_transition(model, r, lo + 1)
    return out


def _integer_transition(model: ChannelModel, r: int, t: int) -> np.ndarray:
    out = np.zeros(model.M + 1)
    pmf = binomial_pmf(t, 1.0 - model.loss_rate)
    k = min(r, t)
    out[:k] = pmf[:k]
    out[k] = pmf[k:].sum()
    return out


@dataclass(frozen=True)
class ExpectedRankTable:
    """Tabulated E_r(i) with the slopes and intercepts of its linear pieces.

    For rank ``r``: ``values[r]`` holds E_r(0..i_max[r] + 1), and
    ``slopes[r][i]`` / ``intercepts[r][i]`` for ``i`` in ``0..i_max[r]``
    define the pieces ``slope * t + intercept`` whose lower envelope is E_r
    on ``[0, i_max[r]]``.
    """

    model: ChannelModel
    i_max: np.ndarray
    values: tuple[np.ndarray, ...]
    slopes: tuple[np.ndarray, ...]
    intercepts: tuple[np.ndarray, ...]
    epsilon: float = DEFAULT_EPSILON
    _padded: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def M(self) -> int:
        return self.model.M

    @property
    def max_segments(self) -> int:
        """Uniform segment index bound I = max_r i_max[r]."""
        return int(self.i_max.max())

    def value(self, r: int, t: float) -> float:
        """E_r(t) by interpolating the table; requires 0 <= t <= i_max[r] + 1."""
        if t < 0 or t > self.i_max[r] + 1:
            raise ValueError(f"t={t} outside tabulated range for rank {r}")
        lo = min(math.floor(t), int(self.i_max[r]))
        frac = t - lo
        v = self.values[r]
        return float(v[lo] + frac * (v[lo + 1] - v[lo]))

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        """Vector (E_r(t_r))_r for a recoding vector ``t``."""
        t = np.asarray(t, dtype=float)
        return np.array([self.value(r, t[r]) for r in range(self.M + 1)])

    def padded(self, n_segments: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Slope and intercept matrices of shape (M+1, I+1) with flat padding.

        Pieces beyond ``i_max[r]`` get slope 0 and intercept E_r(i_max[r]);
        the lower envelope is unchanged on ``[0, i_max[r]]`` because E_r is
        nondecreasing.
        """
        I = self.max_segments if n_segments is None else int(n_segments)
        if I < self.max_segments:
            raise ValueError(f"segment count {I} below max i_max {self.max_segments}")
        if I not in self._padded:
            slopes = np.zeros((self.M + 1, I + 1))
            icpt = np.zeros((self.M + 1, I + 1))
            for r in range(self.M + 1):
                n = int(self.i_max[r]) + 1
                slopes[r, :n] = self.slopes[r]
                icpt[r, :n] = self.intercepts[r]
                icpt[r, n:] = self.values[r][n - 1]
            slopes.flags.writeable = False
            icpt.flags.writeable = False
            self._padded[I] = (slopes, icpt)
        return self._padded[I]

    def to_csv(self, path: str | Path) -> None:
        """Dump rows (r, i, E, delta, zeta) for i in 0..i_max[r]."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "i", "E", "delta", "zeta"])
            for r in range(self.M + 1):
                for i in range(int(self.i_max[r]) + 1):
                    w.writerow([r, i, repr(float(self.values[r][i])),
                                repr(float(self.slopes[r][i])), repr(float(self.intercepts[r][i]))])


def build_table(model: ChannelModel, epsilon: float = DEFAULT_EPSILON,
                hard_cap: int = DEFAULT_HARD_CAP) -> ExpectedRankTable:
    """Tabulate E_r(i) for every rank, stopping at the first marginal gain below ``epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if hard_cap < model.M:
        raise ValueError(f"hard cap {hard_cap} below batch size {model.M}")
    M = model.M
    q = 1.0 - model.loss_rate
    # E_r(i) for all r, i up to hard_cap + 1 in one pass
    n_max = hard_cap + 1
    full = np.zeros((M + 1, n_max + 1))
    ranks = np.arange(M + 1)[:, None]
    for i in range(1, n_max + 1):
        pmf = binomial_pmf(i, q)
        full[:, i] = np.minimum(np.arange(i + 1)[None, :], ranks) @ pmf

    i_max = np.zeros(M + 1, dtype=int)
    values, slopes, intercepts = [], [], []
    for r in range(M + 1):
        gains = np.diff(full[r])
        below = np.flatnonzero(gains < epsilon)
        im = int(min(below[0], hard_cap)) if below.size else hard_cap
        i_max[r] = im
        v = full[r, : im + 2].copy()
        d = np.diff(v)
        z = v[:-1] - np.arange(im + 1) * d
        for a in (v, d, z):
            a.flags.writeable = False
        values.append(v)
        slopes.append(d)
        intercepts.append(z)
    i_max.flags.writeable = False
    return ExpectedRankTable(model, i_max, tuple(values), tuple(slopes), tuple(intercepts), epsilon)


def eval_piecewise(table: ExpectedRankTable, r: int, t: float) -> float:
    """Lower envelope min_i (slope_i * t + intercept_i) for rank ``r``."""
    if not 0.0 <= t <= table.i_max[r]:
        raise ValueError(f"t={t} outside [0, {table.i_max[r]}] for rank {r}")
    return float(np.min(table.slopes[r] * t + table.intercepts[r]))
