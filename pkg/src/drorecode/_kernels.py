"""Compiled inner loop of the adaptive PDHG solver.

Everything here operates on raw CSR arrays so a whole run of iterations
between two restart checks executes without returning to Python.
"""

import numpy as np
from numba import njit

STEP_FLOOR = 1e-12


@njit(cache=True)
def balance_steps(tau, sigma, alpha, eta, balance, primal_res, dual_res):
    """One residual-balancing update; returns (tau, sigma, alpha)."""
    if primal_res > balance * dual_res:
        tau = tau / (1.0 - alpha)
        sigma = sigma * (1.0 - alpha)
        alpha = alpha * eta
    elif dual_res > balance * primal_res:
        tau = tau * (1.0 - alpha)
        sigma = sigma / (1.0 - alpha)
        alpha = alpha * eta
    return tau, sigma, alpha


@njit(cache=True)
def _csr_matvec(indptr, indices, data, x, out):
    for i in range(indptr.size - 1):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc += data[p] * x[indices[p]]
        out[i] = acc


@njit(cache=True)
def _kkt(c, b, nonneg, y, z, Ay, ATz, b_scale, c_scale):
    pinf = 0.0
    for i in range(b.size):
        v = Ay[i] - b[i]
        if v > pinf:
            pinf = v
    dinf = 0.0
    pobj = 0.0
    for j in range(c.size):
        if nonneg[j] and -y[j] > pinf:
            pinf = -y[j]
        rc = c[j] + ATz[j]
        if nonneg[j]:
            v = -rc if rc < 0.0 else 0.0
        else:
            v = abs(rc)
        if v > dinf:
            dinf = v
        pobj += c[j] * y[j]
    dobj = 0.0
    for i in range(b.size):
        dobj -= b[i] * z[i]
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return pinf / b_scale, dinf / c_scale, gap


@njit(cache=True)
def pdhg_iterations(Ap, Ai, Ax, Tp, Ti, Tx, c, b, nonneg,
                    y, z, Ay, ATz, y_sum, z_sum, best_y, best_z,
                    state, params, flags, hist, k, n_steps):
    """Run up to ``n_steps`` accepted iterations starting at iteration ``k``.

    ``state`` = [tau, sigma, alpha, w_sum, best_err]; ``params`` =
    [eta_alpha, balance, backtrack_c, backtrack_factor, tol, b_scale,
    c_scale]; ``flags`` = [balancing, floor_hit, backtracks, converged].
    ``hist`` rows: primal, dual, gap, balance primal, balance dual, tau, sigma.
    Returns the iteration counter after the run.
    """
    m = b.size
    n = c.size
    y1 = np.empty(n)
    z1 = np.empty(m)
    Ay1 = np.empty(m)
    ATz1 = np.empty(n)
    eta_a, bal, bt_c, bt_f, tol, b_scale, c_scale = params[0], params[1], params[2], params[3], params[4], params[5], params[6]
    done = 0
    while done < n_steps and k < hist.shape[1]:
        tau = state[0]
        sigma = state[1]
        for j in range(n):
            v = y[j] - tau * (ATz[j] + c[j])
            if nonneg[j] and v < 0.0:
                v = 0.0
            y1[j] = v
        _csr_matvec(Ap, Ai, Ax, y1, Ay1)
        for i in range(m):
            v = z[i] + sigma * (2.0 * Ay1[i] - Ay[i] - b[i])
            z1[i] = v if v > 0.0 else 0.0
        dy2 = 0.0
        for j in range(n):
            d = y1[j] - y[j]
            dy2 += d * d
        dz2 = 0.0
        cross = 0.0
        for i in range(m):
            d = z1[i] - z[i]
            dz2 += d * d
            cross += d * (Ay1[i] - Ay[i])
        if flags[1] == 0 and bt_c * (dy2 / (2.0 * tau) + dz2 / (2.0 * sigma)) < 2.0 * cross:
            state[0] = tau * bt_f
            state[1] = sigma * bt_f
            if state[0] < STEP_FLOOR or state[1] < STEP_FLOOR:
                flags[1] = 1
                state[0] = max(state[0], STEP_FLOOR)
                state[1] = max(state[1], STEP_FLOOR)
            flags[2] += 1
            continue
        _csr_matvec(Tp, Ti, Tx, z1, ATz1)
        rp = 0.0
        for j in range(n):
            rp += abs((y1[j] - y[j]) / tau - (ATz1[j] - ATz[j]))
            y[j] = y1[j]
            ATz[j] = ATz1[j]
            y_sum[j] += tau * y1[j]
        rd = 0.0
        for i in range(m):
            rd += abs((z1[i] - z[i]) / sigma - (Ay1[i] - Ay[i]))
            z[i] = z1[i]
            Ay[i] = Ay1[i]
            z_sum[i] += tau * z1[i]
        state[3] += tau
        pres, dres, gap = _kkt(c, b, nonneg, y, z, Ay, ATz, b_scale, c_scale)
        hist[0, k] = pres
        hist[1, k] = dres
        hist[2, k] = gap
        hist[3, k] = rp
        hist[4, k] = rd
        hist[5, k] = tau
        hist[6, k] = sigma
        k += 1
        done += 1
        err = max(pres, max(dres, gap))
        if err < state[4]:
            state[4] = err
            best_y[:] = y
            best_z[:] = z
        if err <= tol:
            flags[3] = 1
            return k
        if flags[0] == 1:
            t2, s2, a2 = balance_steps(state[0], state[1], state[2], eta_a, bal, rp, rd)
            state[0] = max(t2, STEP_FLOOR)
            state[1] = max(s2, STEP_FLOOR)
            state[2] = a2
    return k
