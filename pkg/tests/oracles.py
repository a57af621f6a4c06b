"""Reference solutions computed without the package's own solvers."""

import itertools

import numpy as np
from scipy.optimize import linprog

from drorecode.rank_model import expected_rank


def highs(lp):
    """Solve an LpProblem with scipy's HiGHS; returns (x, objective)."""
    bounds = [(0, None) if nn else (None, None) for nn in lp.nonneg]
    res = linprog(lp.c, A_ub=lp.A.toarray() if lp.A.shape[0] * lp.A.shape[1] < 4e6 else lp.A,
                  b_ub=lp.b, bounds=bounds, method="highs")
    assert res.status == 0, res.message
    return res.x, res.fun


def vertex_enumeration(c, A, b, nonneg):
    """min c x over {A x <= b, x_i >= 0 where nonneg}; assumes a bounded nonempty region."""
    n = c.size
    G = np.vstack([A, -np.eye(n)[nonneg]])
    h = np.concatenate([b, np.zeros(int(nonneg.sum()))])
    best = np.inf
    for idx in itertools.combinations(range(G.shape[0]), n):
        sub = G[list(idx)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, h[list(idx)])
        if np.all(G @ x <= h + 1e-9):
            best = min(best, c @ x)
    return best


def worst_case_primal(values, samples, rho, sense):
    """inf (sense='min') or sup (sense='max') of E_h[values] over the W1 ball, by a transport LP."""
    values = np.asarray(values, dtype=float)
    R = values.size
    ranks, counts = np.unique(np.asarray(samples), return_counts=True)
    w = counts / counts.sum()
    K = ranks.size
    d = np.abs(ranks[:, None] - np.arange(R)[None, :]).astype(float)
    cost = np.tile(values, K) * (1.0 if sense == "min" else -1.0)
    A_eq = np.kron(np.eye(K), np.ones(R))
    res = linprog(cost, A_ub=d.ravel()[None, :], b_ub=[rho], A_eq=A_eq, b_eq=w,
                  bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return res.fun if sense == "min" else -res.fun


def saa_grid_search(h, model, t_avg, step=0.25, cap=None):
    """Best objective over recoding vectors on a quarter-integer grid with sum h t <= t_avg."""
    support = np.flatnonzero(h > 0)
    cap = cap if cap is not None else t_avg / h[support].min()
    axes = []
    for r in support:
        hi = min(cap, t_avg / h[r])
        axes.append(np.arange(0.0, hi + 1e-12, step))
    best = 0.0
    for combo in itertools.product(*axes):
        t = np.array(combo)
        if h[support] @ t <= t_avg + 1e-12:
            val = sum(h[r] * expected_rank(model, int(r), float(x)) for r, x in zip(support, t))
            best = max(best, val)
    return best
