"""Sparse inequality-form LPs, arithmetic-mean scaling and an adaptive PDHG solver.

Problems are ``min c^T x  s.t.  A x <= b`` with each variable either
nonnegative or free.  The solver runs the primal-dual hybrid gradient
iteration on the saddle function ``c^T y + z^T (A y - b)`` with ``z >= 0``,
adapting its step sizes by backtracking and residual balancing.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._kernels import STEP_FLOOR, balance_steps, pdhg_iterations

log = logging.getLogger(__name__)

# A few passes suffice; many passes on epigraph rows with tiny slopes blow the
# column scales up and the recovered point loses accuracy.
SCALE_PASSES = 3


@dataclass
class LpProblem:
    """``min c @ x`` subject to ``A @ x <= b``; ``nonneg[i]`` marks ``x_i >= 0``."""

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    nonneg: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.nonneg = np.asarray(self.nonneg, dtype=bool)
        self.A = sp.csr_matrix(self.A, dtype=float)
        m, n = self.A.shape
        if self.c.shape != (n,) or self.nonneg.shape != (n,):
            raise ValueError(f"cost/sign mask length must equal {n} columns")
        if self.b.shape != (m,):
            raise ValueError(f"rhs length {self.b.shape} does not match {m} rows")
        if not (np.all(np.isfinite(self.A.data)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.c))):
            raise ValueError("LP data must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.where(self.nonneg, 0.0, -np.inf)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)

    def max_violation(self, x: np.ndarray) -> float:
        """Largest violation of the rows and sign constraints at ``x``."""
        rows = np.max(self.A @ x - self.b, initial=0.0)
        signs = np.max(-x[self.nonneg], initial=0.0)
        return float(max(rows, signs, 0.0))


@dataclass
class Preconditioner:
    """Row scaling ``D_L`` (for the kept rows) and column scaling ``D_R``."""

    row_scale: np.ndarray
    col_scale: np.ndarray
    kept_rows: np.ndarray

    def recover_primal(self, y: np.ndarray) -> np.ndarray:
        return self.col_scale * y

    def recover_dual(self, z: np.ndarray, n_rows: int) -> np.ndarray:
        out = np.zeros(n_rows)
        out[self.kept_rows] = self.row_scale * z
        return out


def _mean_abs(M: sp.csr_matrix) -> np.ndarray:
    """Arithmetic mean of |nonzeros| per row (0 for empty rows)."""
    counts = np.diff(M.indptr)
    sums = np.asarray(abs(M).sum(axis=1)).ravel()
    return np.divide(sums, counts, out=np.zeros(M.shape[0]), where=counts > 0)


def precondition(p: LpProblem, iters: int = SCALE_PASSES) -> tuple[LpProblem, Preconditioner]:
    """Alternating arithmetic-mean row/column scaling.

    Each pass divides rows, then columns, by the mean magnitude of their
    nonzeros; a final row pass leaves every row with mean magnitude 1.
    Rows without nonzeros are dropped (with a warning), or rejected as
    infeasible when their right-hand side is negative.
    """
    A = p.A.copy()
    A.eliminate_zeros()
    b = p.b
    counts = np.diff(A.indptr)
    kept = np.flatnonzero(counts > 0)
    if kept.size < A.shape[0]:
        empty = np.flatnonzero(counts == 0)
        if np.any(b[empty] < 0):
            raise ValueError("empty constraint row with negative right-hand side: LP infeasible")
        warnings.warn(f"dropping {empty.size} all-zero constraint rows", RuntimeWarning, stacklevel=2)
        A = A[kept]
        b = b[kept]
    m, n = A.shape
    dl = np.ones(m)
    dr = np.ones(n)
    S = A.copy()
    for _ in range(max(iters, 0)):
        rs = 1.0 / _mean_abs(S)
        S = sp.diags(rs) @ S
        dl *= rs
        cm = _mean_abs(S.T.tocsr())
        cs = np.where(cm > 0, 1.0 / np.where(cm > 0, cm, 1.0), 1.0)
        S = (S @ sp.diags(cs)).tocsr()
        dr *= cs
    rs = 1.0 / _mean_abs(S)
    S = (sp.diags(rs) @ S).tocsr()
    dl *= rs
    scaled = LpProblem(c=dr * p.c, A=S, b=dl * b, nonneg=p.nonneg.copy())
    return scaled, Preconditioner(row_scale=dl, col_scale=dr, kept_rows=kept)


def spectral_norm_estimate(A, rtol: float = 1e-6, max_iter: int = 200, seed: int = 0) -> float:
    """Largest singular value of ``A`` by power iteration on ``A^T A``."""
    A = sp.csr_matrix(A) if not isinstance(A, np.ndarray) else A
    AT = A.T
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = AT @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = math.sqrt(nw)
        v = w / nw
        if abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return est


@dataclass
class StepState:
    """Step sizes and adaptivity level of the adaptive PDHG."""

    tau: float
    sigma: float
    alpha: float = 0.95
    eta: float = 0.95
    balance: float = 1.5
    floor_hit: bool = False


def adapt_step_sizes(state: StepState, primal_res: float, dual_res: float) -> tuple[float, float]:
    """Residual balancing: enlarge the step of whichever side lags.

    If the primal residual exceeds ``balance`` times the dual one, tau grows
    by 1/(1 - alpha) and sigma shrinks by (1 - alpha); symmetrically for the
    dual side.  tau * sigma is preserved and alpha decays by ``eta`` after
    every change.
    """
    tau, sigma, alpha = balance_steps(state.tau, state.sigma, state.alpha, state.eta,
                                      state.balance, primal_res, dual_res)
    state.tau, state.sigma, state.alpha = tau, sigma, alpha
    _apply_floor(state)
    return state.tau, state.sigma


def backtrack(state: StepState, factor: float = 0.5) -> tuple[float, float]:
    state.tau *= factor
    state.sigma *= factor
    _apply_floor(state)
    return state.tau, state.sigma


def _apply_floor(state: StepState) -> None:
    if state.tau < STEP_FLOOR or state.sigma < STEP_FLOOR:
        state.floor_hit = True
        state.tau = max(state.tau, STEP_FLOOR)
        state.sigma = max(state.sigma, STEP_FLOOR)


def stability_ok(dy: np.ndarray, dz: np.ndarray, A_dy: np.ndarray, tau: float, sigma: float,
                 c: float = 0.9) -> bool:
    """Backtracking test c*(|dy|^2/(2 tau) + |dz|^2/(2 sigma)) >= 2 dz^T A dy."""
    lhs = c * (dy @ dy / (2.0 * tau) + dz @ dz / (2.0 * sigma))
    return lhs >= 2.0 * (dz @ A_dy)


@dataclass
class PdhgOptions:
    """Tunable constants of the adaptive PDHG.

    ``balancing`` enables per-iteration residual balancing (``balance``,
    ``alpha0``, ``eta_alpha``); ``restart`` enables restarts to the running
    average, checked every ``restart_check`` iterations; ``primal_weight``
    re-balances the step ratio at each restart from the distance travelled.
    """

    tol: float = 1e-6
    max_iter: int = 200_000
    alpha0: float = 0.95
    eta_alpha: float = 0.95
    balance: float = 1.5
    backtrack_c: float = 0.9
    backtrack_factor: float = 0.5
    step_scale: float = 0.95
    balancing: bool = True
    restart: bool = True
    primal_weight: bool = True
    restart_check: int = 64
    restart_sufficient: float = 0.2
    restart_necessary: float = 0.8
    restart_artificial: float = 0.36


@dataclass
class SolverReport:
    y: np.ndarray
    z: np.ndarray
    iterations: int
    converged: bool
    objective: float
    tau: float
    sigma: float
    primal_residuals: np.ndarray
    dual_residuals: np.ndarray
    gaps: np.ndarray
    balance_primal: np.ndarray
    balance_dual: np.ndarray
    taus: np.ndarray
    sigmas: np.ndarray
    norm_estimate: float
    backtracks: int = 0
    restarts: int = 0
    step_floor_hit: bool = False
    final_kkt: tuple[float, float, float] = (math.inf, math.inf, math.inf)
    unscaled: dict = field(default_factory=dict)

    @property
    def residual(self) -> float:
        """Max of relative primal infeasibility, dual infeasibility and gap at the returned point."""
        return float(max(self.final_kkt))

    @property
    def kkt_history(self) -> np.ndarray:
        return np.maximum(np.maximum(self.primal_residuals, self.dual_residuals), self.gaps)

    def write_trace(self, path: str | Path) -> None:
        """CSV with one row per iteration: iteration, primal_res, dual_res, tau, sigma."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "primal_res", "dual_res", "tau", "sigma"])
            for k in range(len(self.primal_residuals)):
                w.writerow([k + 1, repr(float(self.primal_residuals[k])), repr(float(self.dual_residuals[k])),
                            repr(float(self.taus[k])), repr(float(self.sigmas[k]))])


def kkt_residuals(p: LpProblem, y: np.ndarray, z: np.ndarray, Ay: np.ndarray | None = None,
                  ATz: np.ndarray | None = None) -> tuple[float, float, float]:
    """Relative primal infeasibility, dual infeasibility and duality gap.

    Infeasibilities are max-norms relative to ``1 + |b|_inf`` and
    ``1 + |c|_inf``; the gap is relative to ``1 + |primal| + |dual|``.
    """
    Ay = p.A @ y if Ay is None else Ay
    ATz = p.A.T @ z if ATz is None else ATz
    pinf = max(np.max(Ay - p.b, initial=0.0), np.max(-y[p.nonneg], initial=0.0))
    rc = p.c + ATz
    dinf = np.max(np.abs(np.where(p.nonneg, np.minimum(rc, 0.0), rc)), initial=0.0)
    pobj = p.c @ y
    dobj = -(p.b @ z)
    pres = pinf / (1.0 + np.max(np.abs(p.b), initial=0.0))
    dres = dinf / (1.0 + np.max(np.abs(p.c), initial=0.0))
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return float(pres), float(dres), float(gap)


def _reweight(state: StepState, omega: float) -> None:
    """Set the ratio sigma/tau to omega**2 keeping tau * sigma."""
    s = math.sqrt(state.tau * state.sigma)
    state.tau = s / omega
    state.sigma = s * omega


def solve_pdhg(p: LpProblem, tol: float | None = None, max_iter: int | None = None,
               options: PdhgOptions | None = None, y0: np.ndarray | None = None,
               z0: np.ndarray | None = None, step0: tuple[float, float] | None = None) -> SolverReport:
    """Adaptive PDHG for ``min c^T y  s.t.  A y <= b`` over the sign constraints.

    Each iteration takes a projected primal step along ``-(c + A^T z)``,
    then a projected dual step at the extrapolated point ``2 y_new - y``.
    Step pairs failing the backtracking test are halved and retried.  Runs
    until relative primal infeasibility, dual infeasibility and duality gap
    are all below ``tol``; otherwise the best iterate seen is returned with
    ``converged=False``.
    """
    opts = options or PdhgOptions()
    if tol is not None or max_iter is not None:
        opts = replace(opts, tol=opts.tol if tol is None else tol,
                       max_iter=opts.max_iter if max_iter is None else max_iter)
    A = p.A.tocsr()
    A.sort_indices()
    AT = A.T.tocsr()
    AT.sort_indices()
    m, n = A.shape
    c, b = p.c, p.b
    nonneg = p.nonneg.astype(np.bool_)

    norm = spectral_norm_estimate(A)
    step = opts.step_scale / norm if norm > 0 else 1.0
    st = StepState(tau=step, sigma=step, alpha=opts.alpha0, eta=opts.eta_alpha, balance=opts.balance)
    omega = 1.0
    if step0 is not None:
        st.tau, st.sigma = step0
        omega = math.sqrt(st.sigma / st.tau)
    elif opts.primal_weight:
        cn, bn = np.linalg.norm(c), np.linalg.norm(b)
        if cn > 1e-10 and bn > 1e-10:
            omega = cn / bn
            _reweight(st, omega)

    y = np.zeros(n) if y0 is None else np.maximum(np.asarray(y0, dtype=float), p.lower_bounds)
    z = np.zeros(m) if z0 is None else np.maximum(np.asarray(z0, dtype=float), 0.0)
    Ay = A @ y
    ATz = AT @ z
    y_sum, z_sum = np.zeros(n), np.zeros(m)
    best_y, best_z = y.copy(), z.copy()
    b_scale = 1.0 + np.max(np.abs(b), initial=0.0)
    c_scale = 1.0 + np.max(np.abs(c), initial=0.0)
    state = np.array([st.tau, st.sigma, st.alpha, 0.0, math.inf])
    params = np.array([opts.eta_alpha, opts.balance, opts.backtrack_c, opts.backtrack_factor,
                       opts.tol, b_scale, c_scale])
    flags = np.array([int(opts.balancing), 0, 0, 0], dtype=np.int64)
    hist = np.zeros((7, opts.max_iter))

    y_anchor, z_anchor = y.copy(), z.copy()
    err_anchor = max(kkt_residuals(p, y, z, Ay, ATz))
    err_prev_cand = math.inf
    restarts = 0
    k = 0
    chunk = opts.restart_check if opts.restart else opts.max_iter
    since = 0
    while k < opts.max_iter and not flags[3]:
        k_new = pdhg_iterations(A.indptr, A.indices, A.data, AT.indptr, AT.indices, AT.data,
                                c, b, nonneg, y, z, Ay, ATz, y_sum, z_sum, best_y, best_z,
                                state, params, flags, hist, k, chunk)
        since += k_new - k
        k = k_new
        if flags[3] or not opts.restart or k >= opts.max_iter:
            break
        ya, za = y_sum / state[3], z_sum / state[3]
        Aya, ATza = A @ ya, AT @ za
        err_avg = max(kkt_residuals(p, ya, za, Aya, ATza))
        err_cur = max(hist[0, k - 1], hist[1, k - 1], hist[2, k - 1])
        if err_avg <= opts.tol:
            y[:], z[:], Ay[:], ATz[:] = ya, za, Aya, ATza
            best_y[:], best_z[:] = ya, za
            state[4] = err_avg
            flags[3] = 1
            break
        if err_avg < err_cur:
            cand_err, cy, cz, cAy, cATz = err_avg, ya, za, Aya, ATza
        else:
            cand_err, cy, cz, cAy, cATz = err_cur, y.copy(), z.copy(), Ay.copy(), ATz.copy()
        do_restart = (cand_err <= opts.restart_sufficient * err_anchor
                      or (cand_err <= opts.restart_necessary * err_anchor and cand_err > err_prev_cand)
                      or since >= opts.restart_artificial * k)
        err_prev_cand = cand_err
        if do_restart:
            y[:], z[:], Ay[:], ATz[:] = cy, cz, cAy, cATz
            if opts.primal_weight:
                dyn = np.linalg.norm(y - y_anchor)
                dzn = np.linalg.norm(z - z_anchor)
                if dyn > 1e-10 and dzn > 1e-10:
                    omega = math.exp(0.5 * math.log(dzn / dyn) + 0.5 * math.log(omega))
                    st.tau, st.sigma = state[0], state[1]
                    _reweight(st, omega)
                    state[0], state[1] = st.tau, st.sigma
            y_anchor, z_anchor = y.copy(), z.copy()
            err_anchor = cand_err
            err_prev_cand = math.inf
            y_sum[:] = 0.0
            z_sum[:] = 0.0
            state[3] = 0.0
            since = 0
            restarts += 1

    converged = bool(flags[3])
    floor_hit = bool(flags[1])
    if floor_hit:
        log.warning("PDHG step size hit the floor %g", STEP_FLOOR)
    if converged:
        y_out, z_out = (best_y, best_z) if state[4] <= opts.tol else (y, z)
    else:
        y_out, z_out = best_y, best_z
        log.info("PDHG stopped after %d iterations without convergence (best residual %.3g)", k, state[4])
    hist = hist[:, :k]
    return SolverReport(
        y=y_out.copy(), z=z_out.copy(), iterations=k, converged=converged, objective=float(c @ y_out),
        tau=float(state[0]), sigma=float(state[1]),
        primal_residuals=hist[0].copy(), dual_residuals=hist[1].copy(), gaps=hist[2].copy(),
        balance_primal=hist[3].copy(), balance_dual=hist[4].copy(),
        taus=hist[5].copy(), sigmas=hist[6].copy(), norm_estimate=norm,
        backtracks=int(flags[2]), restarts=restarts, step_floor_hit=floor_hit,
        final_kkt=kkt_residuals(p, y_out, z_out),
    )


def solve(p: LpProblem, tol: float = 1e-6, max_iter: int = 200_000, scale: bool = True,
          scale_iters: int = SCALE_PASSES, options: PdhgOptions | None = None,
          refinements: int = 3) -> tuple[np.ndarray, SolverReport]:
    """Scale, solve by PDHG and map the solution back to the original variables.

    Termination is tested on the scaled problem.  When the recovered point
    still misses ``tol`` on the original problem, the solve continues from
    where it stopped with a tenfold tighter scaled tolerance, at most
    ``refinements`` times.  The report's ``unscaled`` dict holds residuals
    on the original problem; iteration counts and traces cover all rounds.
    """
    if scale:
        sp_, pre = precondition(p, scale_iters)
    else:
        sp_, pre = p, Preconditioner(np.ones(p.shape[0]), np.ones(p.shape[1]), np.arange(p.shape[0]))
    rep = solve_pdhg(sp_, tol=tol, max_iter=max_iter, options=options)
    reports = [rep]
    inner_tol = tol
    used = rep.iterations
    while True:
        x = pre.recover_primal(rep.y)
        z = pre.recover_dual(rep.z, p.shape[0])
        kkt = kkt_residuals(p, x, z)
        if max(kkt) <= tol or not rep.converged or len(reports) > refinements or used >= max_iter:
            break
        inner_tol /= 10.0
        rep = solve_pdhg(sp_, tol=inner_tol, max_iter=max_iter - used, options=options,
                         y0=rep.y, z0=rep.z, step0=(rep.tau, rep.sigma))
        reports.append(rep)
        used += rep.iterations
    if len(reports) > 1:
        rep = _merge_reports(reports)
    rep.unscaled = {"primal_residual": kkt[0], "dual_residual": kkt[1], "gap": kkt[2],
                    "objective": p.objective(x), "z": z, "max_violation": p.max_violation(x)}
    return x, rep


def _merge_reports(reports: list[SolverReport]) -> SolverReport:
    last = reports[-1]
    cat = lambda name: np.concatenate([getattr(r, name) for r in reports])  # noqa: E731
    return replace(
        last,
        iterations=sum(r.iterations for r in reports),
        converged=any(r.converged for r in reports),
        primal_residuals=cat("primal_residuals"), dual_residuals=cat("dual_residuals"), gaps=cat("gaps"),
        balance_primal=cat("balance_primal"), balance_dual=cat("balance_dual"),
        taus=cat("taus"), sigmas=cat("sigmas"),
        backtracks=sum(r.backtracks for r in reports), restarts=sum(r.restarts for r in reports),
        step_floor_hit=any(r.step_floor_hit for r in reports),
        norm_estimate=reports[0].norm_estimate,
    )
