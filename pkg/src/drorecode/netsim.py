"""Rank-level line-network simulation and the sample-size / hop-count experiments.

A batch leaves the source with rank M.  Each node receives a batch of rank r,
sends t_r recoded packets on average over its outgoing link and the next node
sees the rank distribution obtained by ``propagate``.  Methods are judged by
the effective throughput of their fitted policy under the true distribution.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import as_distribution, calibrate_radius, empirical
from .dro import DroInstance, solve_dro
from .rank_model import ChannelModel, ExpectedRankTable, build_table, rank_transition
from .saa import BudgetSaturationWarning, SolverNotConverged, objective, solve_saa_greedy, solve_saa_lp

log = logging.getLogger(__name__)

METHODS = ("SAA-primal", "SAA-LP", "DRO")
CSV_COLUMNS = ("method", "link_or_hop", "N", "t_avg", "trials", "mean_throughput",
               "optimal", "log10_mse", "failures")
NEG_INF = "-inf"


@dataclass
class LineNetwork:
    hops: int = 10
    loss_rates: list[float] = field(default_factory=lambda: [0.2] * 10)
    M: int = 16
    t_avg: float = 16.0
    t0: float | None = None

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError("need at least one hop")
        if len(self.loss_rates) != self.hops:
            raise ValueError(f"{len(self.loss_rates)} loss rates for {self.hops} hops")
        if any(not 0.0 <= p < 1.0 for p in self.loss_rates):
            raise ValueError("loss rates must lie in [0, 1)")
        if self.t_avg <= 0:
            raise ValueError("budget must be positive")
        self.links = [ChannelModel(p, self.M) for p in self.loss_rates]
        cache = {}
        for p, link in zip(self.loss_rates, self.links):
            if p not in cache:
                cache[p] = build_table(link)
        self.tables = [cache[p] for p in self.loss_rates]

    def out_link(self, node: int) -> ChannelModel:
        """Channel that node ``node`` (1-based, fed by link ``node``) recodes for.

        The last node has no downstream link in the list and reuses its
        incoming channel.
        """
        return self.links[min(node, self.hops - 1)]

    def out_table(self, node: int) -> ExpectedRankTable:
        return self.tables[min(node, self.hops - 1)]

    @property
    def source_t(self) -> float:
        return self.t_avg if self.t0 is None else self.t0


@dataclass
class TrialConfig:
    N: int = 15
    trials: int = 10
    eta: float = 0.95
    L: int = 10_000
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 200_000
    methods: tuple[str, ...] = METHODS

    def __post_init__(self):
        if self.N < 1 or self.trials < 1:
            raise ValueError("N and trials must be positive")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")


@dataclass
class TrialResult:
    method: str
    link_or_hop: int
    N: int
    t_avg: float
    throughputs: np.ndarray
    optimal: float
    failures: int = 0
    failed_trials: list[int] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return int(self.throughputs.size)

    @property
    def squared_errors(self) -> np.ndarray:
        return (self.throughputs - self.optimal) ** 2

    @property
    def mse(self) -> float:
        return float(np.mean(self.squared_errors)) if self.trials else math.nan

    @property
    def log10_mse(self) -> float:
        mse = self.mse
        if mse == 0.0:
            return -math.inf
        return math.log10(mse)

    def row(self) -> dict:
        lm = self.log10_mse
        return {
            "method": self.method, "link_or_hop": self.link_or_hop, "N": self.N,
            "t_avg": repr(float(self.t_avg)), "trials": self.trials,
            "mean_throughput": repr(float(np.mean(self.throughputs))) if self.trials else "nan",
            "optimal": repr(float(self.optimal)),
            "log10_mse": NEG_INF if lm == -math.inf else repr(lm),
            "failures": self.failures,
        }


def propagate(h, t, link: ChannelModel) -> np.ndarray:
    """Rank distribution at the next node when rank r batches get t_r packets."""
    h = as_distribution(h)
    t = np.asarray(t, dtype=float)
    if h.size != link.M + 1 or t.size != h.size:
        raise ValueError("distribution, recoding vector and link disagree on M")
    out = np.zeros(h.size)
    for r in np.flatnonzero(h):
        out += h[r] * rank_transition(link, int(r), float(t[r]))
    return out


def source_distribution(net: LineNetwork) -> np.ndarray:
    """Rank distribution arriving at the first node, the source sending ``t0`` packets of rank M."""
    return rank_transition(net.links[0], net.M, net.source_t)


def effective_throughput(h_true, table: ExpectedRankTable, t, t_avg: float, M: int) -> float:
    h_true = np.asarray(h_true, dtype=float)
    spent = float(h_true @ np.asarray(t, dtype=float))
    gain = objective(h_true, table, t) / M
    penalty = 1.0 if spent <= t_avg else t_avg / spent
    return gain * penalty


def optimal_policy(h_true, table: ExpectedRankTable, t_avg: float) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetSaturationWarning)
        return solve_saa_greedy(h_true, table, t_avg)


def optimal_throughput(h_true, table: ExpectedRankTable, t_avg: float, M: int) -> float:
    """Throughput of the greedy policy fitted to the exact distribution."""
    return effective_throughput(h_true, table, optimal_policy(h_true, table, t_avg), t_avg, M)


def link_distributions(net: LineNetwork) -> list[np.ndarray]:
    """True input distribution at every node when all upstream nodes recode optimally."""
    h = source_distribution(net)
    out = [h]
    for node in range(1, net.hops):
        t = optimal_policy(h, net.out_table(node), net.t_avg)
        h = propagate(h, t, net.out_link(node))
        out.append(h)
    return out


def fit_policy(method: str, samples: np.ndarray, table: ExpectedRankTable, t_avg: float,
               cfg: TrialConfig, rng: np.random.Generator) -> np.ndarray:
    """Recoding vector of one method from rank samples; raises SolverNotConverged on failure."""
    h_emp = empirical(samples, table.M)
    if method == "SAA-primal":
        return optimal_policy(h_emp, table, t_avg)
    if method == "SAA-LP":
        return solve_saa_lp(h_emp, table, t_avg, tol=cfg.tol, max_iter=cfg.max_iter)
    rho = calibrate_radius(h_emp, samples.size, eta=cfg.eta, L=cfg.L, rng=rng).rho
    inst = DroInstance(samples, table, rho, rho, t_avg)
    return solve_dro(inst, tol=cfg.tol, max_iter=cfg.max_iter, raise_on_failure=True).t


def _trial_rngs(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _sample_size_trial(args):
    h, table, t_avg, M, cfg, key = args
    samples = _trial_rngs(cfg.seed, 0, *key).choice(M + 1, size=cfg.N, p=h)
    out = {}
    for method in cfg.methods:
        try:
            t = fit_policy(method, samples, table, t_avg, cfg, _trial_rngs(cfg.seed, 1, *key))
            out[method] = effective_throughput(h, table, t, t_avg, M)
        except SolverNotConverged as exc:
            log.warning("%s failed on trial %s: %s", method, key, exc)
            out[method] = None
    return out


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _collect(per_trial, method, idx, N, t_avg, optimal) -> TrialResult:
    vals, failed = [], []
    for k, res in enumerate(per_trial):
        if res[method] is None:
            failed.append(k)
        else:
            vals.append(res[method])
    return TrialResult(method, idx, N, t_avg, np.array(vals), optimal, len(failed), failed)


def run_sample_size_experiment(net: LineNetwork, cfg: TrialConfig, sample_sizes=(15,),
                               links=(1, 4, 7, 10), workers: int = 1) -> list[TrialResult]:
    """MSE of each method's throughput against the optimum, per link and sample size.

    Links are 1-based.  The distribution at a link is the one produced by
    optimal recoding at every upstream node.
    """
    dists = link_distributions(net)
    results = []
    for link in links:
        if not 1 <= link <= net.hops:
            raise ValueError(f"link {link} outside 1..{net.hops}")
        h = dists[link - 1]
        table = net.out_table(link)
        opt = optimal_throughput(h, table, net.t_avg, net.M)
        for N in sample_sizes:
            c = TrialConfig(N=N, trials=cfg.trials, eta=cfg.eta, L=cfg.L, seed=cfg.seed,
                            tol=cfg.tol, max_iter=cfg.max_iter, methods=cfg.methods)
            jobs = [(h, table, net.t_avg, net.M, c, (link, N, k)) for k in range(cfg.trials)]
            per_trial = _map(_sample_size_trial, jobs, workers)
            results += [_collect(per_trial, m, link, N, net.t_avg, opt) for m in cfg.methods]
    return results


def _hop_trial(args):
    net, cfg, method, k = args
    budget_key = int(round(net.t_avg * 1000))
    draw_rng = _trial_rngs(cfg.seed, 0, budget_key, k)
    h = source_distribution(net)
    out = []
    for hop in range(net.hops):
        table = net.out_table(hop + 1)
        samples = draw_rng.choice(net.M + 1, size=cfg.N, p=h)
        fit_rng = _trial_rngs(cfg.seed, 1, budget_key, k, hop)
        try:
            t = fit_policy(method, samples, table, net.t_avg, cfg, fit_rng)
        except SolverNotConverged as exc:
            log.warning("%s failed at hop %d of trial %d: %s", method, hop + 1, k, exc)
            return out + [None] * (net.hops - hop)
        out.append(effective_throughput(h, table, t, net.t_avg, net.M))
        if hop + 1 < net.hops:
            h = propagate(h, t, net.out_link(hop + 1))
    return out


def run_hop_experiment(net: LineNetwork, cfg: TrialConfig, workers: int = 1) -> list[TrialResult]:
    """Each method recodes with its own fitted policy at every hop.

    The error at hop k compares the throughput reached there with the optimal
    throughput of the first hop.
    """
    opt1 = optimal_throughput(source_distribution(net), net.out_table(1), net.t_avg, net.M)
    results = []
    for method in cfg.methods:
        jobs = [(net, cfg, method, k) for k in range(cfg.trials)]
        runs = _map(_hop_trial, jobs, workers)
        for hop in range(net.hops):
            per_trial = [{method: run[hop]} for run in runs]
            results.append(_collect(per_trial, method, hop + 1, cfg.N, net.t_avg, opt1))
    return results


def write_results(path: str | Path, results: list[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for res in results:
            w.writerow(res.row())


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
