"""Sample-average-approximation baselines for adaptive recoding.

Both baselines maximize sum_r h_r E_r(t_r) subject to sum_r h_r t_r = t_avg
with the empirical distribution plugged in for h.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp

from .distributions import as_distribution
from .lp_solver import LpProblem, solve
from .rank_model import ExpectedRankTable

RANGE_TOL = 1e-9


class BudgetSaturationWarning(UserWarning):
    """The budget exceeds what the ranks in the support can absorb."""


class SolverNotConverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def check_recoding_vector(table: ExpectedRankTable, t, tol: float = RANGE_TOL) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.shape != (table.M + 1,):
        raise ValueError(f"recoding vector must have {table.M + 1} entries")
    if np.any(t < -tol) or np.any(t > table.i_max + tol):
        raise ValueError("recoding vector outside [0, i_max]")
    return np.clip(t, 0.0, table.i_max)


def objective(h, table: ExpectedRankTable, t) -> float:
    """Expected next-hop rank sum_r h_r E_r(t_r)."""
    h = np.asarray(h, dtype=float)
    t = check_recoding_vector(table, t)
    return float(h @ table.evaluate(t))


def solve_saa_greedy(h, table: ExpectedRankTable, t_avg: float) -> np.ndarray:
    """Greedy marginal allocation of the budget over unit segments.

    Segments (r, i) are taken in nonincreasing order of slope Delta_{r,i},
    ties broken by lower r then lower i; each costs h_r of budget and the
    last one is taken fractionally.  Ranks with h_r = 0 get nothing.  If the
    budget cannot be spent, the saturated vector t_r = i_max[r] on the
    support is returned with a :class:`BudgetSaturationWarning`.
    """
    h = as_distribution(h)
    if t_avg <= 0:
        raise ValueError("budget must be positive")
    M = table.M
    t = np.zeros(M + 1)
    support = np.flatnonzero(h > 0)
    seg_r = np.concatenate([np.full(int(table.i_max[r]), r) for r in support] or [np.zeros(0, int)])
    seg_i = np.concatenate([np.arange(int(table.i_max[r])) for r in support] or [np.zeros(0, int)])
    seg_d = np.array([table.slopes[r][i] for r, i in zip(seg_r, seg_i)])
    order = np.lexsort((seg_i, seg_r, -seg_d)) if seg_r.size else np.zeros(0, int)

    remaining = float(t_avg)
    for k in order:
        r = seg_r[k]
        cost = h[r]
        if cost <= remaining:
            t[r] += 1.0
            remaining -= cost
        else:
            t[r] += remaining / cost
            remaining = 0.0
            break
    if remaining > 0.0:
        warnings.warn(f"budget {t_avg} exceeds capacity; {remaining:.6g} left unspent",
                      BudgetSaturationWarning, stacklevel=2)
    return t


def saa_lp(h, table: ExpectedRankTable, t_avg: float) -> tuple[LpProblem, np.ndarray]:
    """Epigraph LP over the support ranks S: variables (t_S, lam_S).

    max sum h_r lam_r  s.t.  lam_r <= Delta_{r,i} t_r + zeta_{r,i},
    sum h_r t_r <= t_avg,  0 <= t_r <= i_max_r.
    """
    h = as_distribution(h)
    S = np.flatnonzero(h > 0)
    k = S.size
    rows, cols, vals, rhs = [], [], [], []
    row = 0
    for j, r in enumerate(S):
        for i in range(int(table.i_max[r]) + 1):
            rows += [row, row]
            cols += [j, k + j]
            vals += [-table.slopes[r][i], 1.0]
            rhs.append(table.intercepts[r][i])
            row += 1
    rows += [row] * k
    cols += list(range(k))
    vals += list(h[S])
    rhs.append(t_avg)
    rows += list(row + 1 + np.arange(k))
    cols += list(range(k))
    vals += [1.0] * k
    rhs += list(table.i_max[S].astype(float))
    A = sp.csr_matrix((vals, (rows, cols)), shape=(row + 1 + k, 2 * k))
    c = np.concatenate([np.zeros(k), -h[S]])
    nonneg = np.concatenate([np.ones(k, bool), np.zeros(k, bool)])
    return LpProblem(c=c, A=A, b=np.array(rhs), nonneg=nonneg), S


def solve_saa_lp(h, table: ExpectedRankTable, t_avg: float, tol: float = 1e-6,
                 max_iter: int = 200_000, raise_on_failure: bool = True, return_report: bool = False):
    """Solve the SAA epigraph LP with the PDHG solver; returns the recoding vector.

    With ``return_report`` the solver report is returned as well.
    """
    h = as_distribution(h)
    if t_avg <= 0:
        raise ValueError("budget must be positive")
    t = np.zeros(table.M + 1)
    lp, S = saa_lp(h, table, t_avg)
    x, rep = solve(lp, tol=tol, max_iter=max_iter)
    if not rep.converged and raise_on_failure:
        raise SolverNotConverged(f"SAA LP did not converge in {rep.iterations} iterations "
                                 f"(residual {rep.residual:.3g})", rep)
    t[S] = np.clip(x[: S.size], 0.0, table.i_max[S])
    return (t, rep) if return_report else t
