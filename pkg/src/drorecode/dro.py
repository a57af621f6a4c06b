"""Wasserstein distributionally robust recoding: LP assembly, solve and dual evaluators.

The robust problem maximizes the worst-case expected next-hop rank over a
Wasserstein ball of radius ``rho1`` around the empirical rank distribution,
subject to the worst-case expected number of packets over a ball of radius
``rho2`` staying within ``t_avg``.  Its LP form has variables

    x = (t_0..t_M, lam01, lam11..lamN1, lam02, lam12..lamN2)

and is solved with :mod:`drorecode.lp_solver`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .distributions import as_samples
from .lp_solver import SCALE_PASSES, LpProblem, PdhgOptions, SolverReport, solve
from .rank_model import ExpectedRankTable
from .saa import SolverNotConverged, check_recoding_vector

log = logging.getLogger(__name__)

CLIP_LIMIT = 1e-5
FEASIBILITY_TOL = 1e-6


@dataclass
class DroInstance:
    samples: np.ndarray
    table: ExpectedRankTable
    rho1: float
    rho2: float
    t_avg: float
    n_segments: int | None = None

    def __post_init__(self):
        self.samples = as_samples(self.samples, self.table.M)
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("radii must be nonnegative")
        if self.t_avg <= 0:
            raise ValueError("budget must be positive")
        if self.n_segments is None:
            self.n_segments = self.table.max_segments
        if self.n_segments < self.table.max_segments:
            raise ValueError(f"segment count {self.n_segments} below max i_max {self.table.max_segments}")

    @property
    def M(self) -> int:
        return self.table.M

    @property
    def N(self) -> int:
        return self.samples.size


@dataclass
class DroSolution:
    t: np.ndarray
    lambda01: float
    lambda02: float
    lambda1: np.ndarray
    lambda2: np.ndarray
    objective: float
    x: np.ndarray
    report: SolverReport
    clip: float = 0.0
    block_ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def converged(self) -> bool:
        return self.report.converged

    def write_policy(self, path: str | Path) -> None:
        write_policy(path, self.t)


def write_policy(path: str | Path, t) -> None:
    """Policy file: first line M, then t_0..t_M one per line."""
    t = np.asarray(t, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"{t.size - 1}\n")
        for v in t:
            fh.write(f"{float(v)!r}\n")


def read_policy(path: str | Path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty policy file")
    M = int(lines[0])
    t = np.array([float(v) for v in lines[1:]])
    if t.size != M + 1:
        raise ValueError(f"{path}: expected {M + 1} values, found {t.size}")
    if np.any(t < 0):
        raise ValueError(f"{path}: negative packet counts")
    return t


def _blocks(samples: np.ndarray, aggregate: bool) -> tuple[np.ndarray, np.ndarray]:
    """Block ranks and their weights (1/N each, or merged counts)."""
    N = samples.size
    if aggregate:
        ranks, counts = np.unique(samples, return_counts=True)
        return ranks, counts / N
    return samples.copy(), np.full(N, 1.0 / N)


def build_dro_lp(inst: DroInstance, aggregate: bool = False, cap_t: bool = False) -> LpProblem:
    """Assemble the robust LP in minimization form ``min f^T x  s.t.  A x <= b``.

    Rows: one budget row, then for each sample block j the (M+1)(I+1)
    epigraph rows ``lam_j1 - Delta_{r,i} t_r - |r - r_j| lam01 <= zeta_{r,i}``,
    then for each block the M+1 rows ``t_r - |r - r_j| lam02 - lam_j2 <= 0``.
    With ``aggregate=True`` samples of equal rank share one block weighted
    by their frequency; the optimum is unchanged.  ``cap_t`` appends the
    rows ``t_r <= i_max_r`` (see :func:`build_dro_lp_compact`).
    """
    ranks, w = _blocks(inst.samples, aggregate)
    K = ranks.size
    M, I = inst.M, inst.n_segments
    R1 = M + 1
    S = I + 1
    n = R1 + 2 * K + 2
    c_t = np.arange(R1)
    c_l01 = R1
    c_l1 = R1 + 1 + np.arange(K)
    c_l02 = R1 + 1 + K
    c_l2 = R1 + 2 + K + np.arange(K)

    slopes, icpt = inst.table.padded(I)
    dist = np.abs(np.arange(R1)[None, :] - ranks[:, None]).astype(float)  # (K, M+1)

    # budget row
    rows = [np.zeros(K + 1, int)]
    cols = [np.concatenate([[c_l02], c_l2])]
    vals = [np.concatenate([[inst.rho2], w])]

    # epigraph rows, block j occupies rows 1 + j*R1*S ... ; row index = 1 + (j*R1 + r)*S + i
    n1 = K * R1 * S
    r1 = 1 + np.arange(n1)
    j_of = np.repeat(np.arange(K), R1 * S)
    r_of = np.tile(np.repeat(np.arange(R1), S), K)
    i_of = np.tile(np.arange(S), K * R1)
    rows += [r1, r1, r1]
    cols += [c_t[r_of], np.full(n1, c_l01), c_l1[j_of]]
    vals += [-slopes[r_of, i_of], -dist[j_of, r_of], np.ones(n1)]

    # expectation rows
    n2 = K * R1
    r2 = 1 + n1 + np.arange(n2)
    j2 = np.repeat(np.arange(K), R1)
    rr2 = np.tile(np.arange(R1), K)
    rows += [r2, r2, r2]
    cols += [c_t[rr2], np.full(n2, c_l02), c_l2[j2]]
    vals += [np.ones(n2), -dist[j2, rr2], -np.ones(n2)]

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    b = [np.array([inst.t_avg]), np.tile(icpt.ravel(), K), np.zeros(n2)]
    m = 1 + n1 + n2
    if cap_t:
        rows = np.concatenate([rows, m + np.arange(R1)])
        cols = np.concatenate([cols, c_t])
        vals = np.concatenate([vals, np.ones(R1)])
        b.append(inst.table.i_max.astype(float))
        m += R1
    keep = vals != 0.0
    A = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m, n))
    b = np.concatenate(b)

    f = np.zeros(n)
    f[c_l01] = inst.rho1
    f[c_l1] = -w
    nonneg = np.zeros(n, bool)
    nonneg[: R1 + 1] = True
    nonneg[c_l02] = True
    return LpProblem(c=f, A=A, b=b, nonneg=nonneg)


def build_dro_lp_compact(inst: DroInstance, cap_t: bool = True) -> LpProblem:
    """Equivalent, smaller LP with one hypograph variable per rank.

    Variables ``(t, e, lam01, lam1_k, lam02, lam2_k)`` over the distinct
    sample ranks k.  The pieces ``e_r <= Delta_{r,i} t_r + zeta_{r,i}``
    appear once instead of once per sample, and each block couples through
    ``lam_k1 - |r - r_k| lam01 - e_r <= 0``.  With ``cap_t`` the rows
    ``t_r <= i_max_r`` are appended; they cut off only optimal points that
    spend budget on the flat tail of E_r, so the value is unchanged and the
    returned ``t`` needs no clipping.
    """
    ranks, w = _blocks(inst.samples, aggregate=True)
    K = ranks.size
    R1 = inst.M + 1
    table = inst.table
    c_t = np.arange(R1)
    c_e = R1 + np.arange(R1)
    c_l01 = 2 * R1
    c_l1 = 2 * R1 + 1 + np.arange(K)
    c_l02 = 2 * R1 + 1 + K
    c_l2 = 2 * R1 + 2 + K + np.arange(K)
    n = 2 * R1 + 2 + 2 * K
    dist = np.abs(np.arange(R1)[None, :] - ranks[:, None]).astype(float)

    rows = [np.zeros(K + 1, int)]
    cols = [np.concatenate([[c_l02], c_l2])]
    vals = [np.concatenate([[inst.rho2], w])]
    b = [np.array([inst.t_avg])]

    seg_r = np.concatenate([np.full(int(table.i_max[r]) + 1, r) for r in range(R1)])
    n1 = seg_r.size
    r1 = 1 + np.arange(n1)
    rows += [r1, r1]
    cols += [c_e[seg_r], c_t[seg_r]]
    vals += [np.ones(n1), -np.concatenate(table.slopes)]
    b.append(np.concatenate(table.intercepts))

    n2 = K * R1
    jj = np.repeat(np.arange(K), R1)
    rr = np.tile(np.arange(R1), K)
    r2 = 1 + n1 + np.arange(n2)
    rows += [r2, r2, r2]
    cols += [c_l1[jj], np.full(n2, c_l01), c_e[rr]]
    vals += [np.ones(n2), -dist[jj, rr], -np.ones(n2)]
    b.append(np.zeros(n2))

    r3 = 1 + n1 + n2 + np.arange(n2)
    rows += [r3, r3, r3]
    cols += [c_t[rr], np.full(n2, c_l02), c_l2[jj]]
    vals += [np.ones(n2), -dist[jj, rr], -np.ones(n2)]
    b.append(np.zeros(n2))

    m = 1 + n1 + 2 * n2
    if cap_t:
        rows.append(m + np.arange(R1))
        cols.append(c_t)
        vals.append(np.ones(R1))
        b.append(table.i_max.astype(float))
        m += R1

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = vals != 0.0
    A = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m, n))
    f = np.zeros(n)
    f[c_l01] = inst.rho1
    f[c_l1] = -w
    nonneg = np.zeros(n, bool)
    nonneg[c_t] = True
    nonneg[c_l01] = True
    nonneg[c_l02] = True
    return LpProblem(c=f, A=A, b=np.concatenate(b), nonneg=nonneg)


FORMULATIONS = ("compact", "aggregated", "blocks")


def solve_dro(inst: DroInstance, tol: float = 1e-6, max_iter: int = 200_000,
              formulation: str = "compact", scale_iters: int = SCALE_PASSES,
              options: PdhgOptions | None = None, raise_on_failure: bool = False) -> DroSolution:
    """Solve the robust LP (scaled PDHG) and extract the recoding vector.

    ``formulation`` picks the LP handed to the solver: ``"blocks"`` is the
    per-sample block form of :func:`build_dro_lp`, ``"aggregated"`` merges
    samples of equal rank, ``"compact"`` is :func:`build_dro_lp_compact`.
    All three carry the rows ``t_r <= i_max_r`` and have the same optimal
    value.  ``t`` is clipped to
    ``[0, i_max]`` and the clipping magnitude is kept in ``DroSolution.clip``.
    With ``rho2 = 0`` entries for ranks that were never sampled are set to 0.
    """
    if formulation == "compact":
        lp = build_dro_lp_compact(inst)
    elif formulation in ("blocks", "aggregated"):
        lp = build_dro_lp(inst, aggregate=formulation == "aggregated", cap_t=True)
    else:
        raise ValueError(f"unknown formulation {formulation!r}; expected one of {FORMULATIONS}")
    x, rep = solve(lp, tol=tol, max_iter=max_iter, scale_iters=scale_iters, options=options)
    if not rep.converged:
        msg = (f"DRO LP did not converge in {rep.iterations} iterations: scaled residuals "
               f"primal {rep.final_kkt[0]:.3g}, dual {rep.final_kkt[1]:.3g}, gap {rep.final_kkt[2]:.3g}")
        if raise_on_failure:
            raise SolverNotConverged(msg, rep)
        log.warning(msg)
    ranks, _ = _blocks(inst.samples, formulation != "blocks")
    K = ranks.size
    R1 = inst.M + 1
    off = 2 * R1 if formulation == "compact" else R1
    t_raw = x[:R1]
    t = np.clip(t_raw, 0.0, inst.table.i_max)
    clip = float(np.max(np.abs(t - t_raw)))
    if clip > CLIP_LIMIT:
        log.warning("clipped recoding vector by %.3g (limit %.1g)", clip, CLIP_LIMIT)
    if inst.rho2 == 0.0:
        # no distribution in the set puts mass off the sample support, so those
        # entries are arbitrary; report them as zero like the SAA policies
        off_support = np.ones(R1, bool)
        off_support[inst.samples] = False
        t[off_support] = 0.0
    return DroSolution(
        t=t, lambda01=float(x[off]), lambda1=x[off + 1: off + 1 + K].copy(),
        lambda02=float(x[off + 1 + K]), lambda2=x[off + 2 + K:].copy(),
        objective=-lp.objective(x), x=x, report=rep, clip=clip, block_ranks=ranks,
    )


def _weighted_blocks(samples, M):
    s = as_samples(samples, M)
    ranks, counts = np.unique(s, return_counts=True)
    return ranks, counts / s.size


def _kinks(values: np.ndarray, ranks: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Nonnegative multipliers where some inner min/max over r changes its argument.

    For block rank s the inner terms are ``values[r] + sign * lam * |r - s|``;
    two terms cross at ``sign * (values[r'] - values[r]) / (d_r - d_r')``.
    """
    R = values.size
    d = np.abs(np.arange(R)[None, :] - ranks[:, None]).astype(float)  # (K, R)
    dv = values[None, :] - values[:, None]  # dv[r, r'] = v_r' - v_r
    dd = d[:, :, None] - d[:, None, :]  # (K, r, r')
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(dd != 0, sign * dv[None] / dd, np.nan)
    lam = lam[np.isfinite(lam) & (lam >= 0)]
    return np.unique(np.concatenate([[0.0], lam]))


def worst_case_utility(t, samples, table: ExpectedRankTable, rho1: float) -> float:
    """inf of E_{r~h}[E_r(t_r)] over the Wasserstein ball of radius rho1.

    Evaluated through its one-dimensional dual
    ``sup_{lam >= 0} -lam rho1 + mean_j min_r (E_r(t_r) + lam |r - r_j|)``,
    a concave piecewise-linear function maximized exactly over its kinks.
    """
    t = check_recoding_vector(table, t)
    v = table.evaluate(t)
    ranks, w = _weighted_blocks(samples, table.M)
    lam = _kinks(v, ranks)
    d = np.abs(np.arange(v.size)[None, :] - ranks[:, None]).astype(float)
    inner = np.min(v[None, None, :] + lam[:, None, None] * d[None], axis=2)  # (C, K)
    vals = -lam * rho1 + inner @ w
    return float(vals.max())


def worst_case_expectation(t, samples, rho2: float) -> float:
    """sup of E_{r~h}[t_r] over the Wasserstein ball of radius rho2 (exact dual)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("recoding vector must be nonnegative")
    ranks, w = _weighted_blocks(samples, t.size - 1)
    lam = _kinks(t, ranks, sign=-1.0)
    d = np.abs(np.arange(t.size)[None, :] - ranks[:, None]).astype(float)
    inner = np.max(t[None, None, :] - lam[:, None, None] * d[None], axis=2)
    vals = lam * rho2 + inner @ w
    return float(vals.min())


def lipschitz_norm(values, h, direction: str = "both") -> float:
    """Lipschitz constant of ``values`` measured from points in the support of ``h``.

    ``direction="both"`` uses |f(s) - f(r)| / |s - r| for r in supp(h);
    ``"down"`` keeps only decreases away from the support and ``"up"`` only
    increases, each floored at 0.
    """
    f = np.asarray(values, dtype=float)
    h = np.asarray(h, dtype=float)
    if f.shape != h.shape:
        raise ValueError("values and distribution must share the support 0..M")
    support = np.flatnonzero(h > 0)
    if support.size == 0:
        raise ValueError("distribution has empty support")
    if f.size == 1:
        return 0.0
    idx = np.arange(f.size)
    diff = f[None, :] - f[support][:, None]  # f(s) - f(r)
    dist = np.abs(idx[None, :] - support[:, None]).astype(float)
    mask = dist > 0
    slope = diff[mask] / dist[mask]
    if direction == "both":
        return float(np.abs(slope).max())
    if direction == "up":
        return float(max(slope.max(), 0.0))
    if direction == "down":
        return float(max((-slope).max(), 0.0))
    raise ValueError(f"unknown direction {direction!r}")
