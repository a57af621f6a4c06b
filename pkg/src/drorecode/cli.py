"""Command-line entry point: ``drorecode {solve,calibrate,experiment}``.

Configuration is a JSON document whose keys are the fields of
:class:`RunConfig`; ``--set key=value`` and the dedicated flags override it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import as_samples, calibrate_radius, empirical
from .dro import DroInstance, solve_dro, worst_case_expectation, worst_case_utility, write_policy
from .netsim import LineNetwork, TrialConfig, run_hop_experiment, run_sample_size_experiment, write_results
from .rank_model import ChannelModel, build_table
from .saa import SolverNotConverged, objective, solve_saa_greedy, solve_saa_lp

log = logging.getLogger("drorecode")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_PARTIAL = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    M: int = 16
    t_avg: float = 16.0
    loss_rate: float = 0.2
    loss_rates: list[float] | None = None
    H: int = 10
    t0: float | None = None
    N: int = 15
    T: int = 10
    eta: float = 0.95
    L: int = 10_000
    tol: float = 1e-6
    max_iter: int = 200_000
    seed: int = 0
    output_dir: str = "results"
    experiment: str = "fig1"
    sample_sizes: list[int] = field(default_factory=lambda: [5, 10, 15, 20, 30, 50, 100])
    links: list[int] = field(default_factory=lambda: [1, 4, 7, 10])
    fig2_budgets: list[float] = field(default_factory=lambda: [16.0, 20.0])
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        ints = ("M", "H", "N", "T", "L", "max_iter", "seed", "workers")
        for k in ints:
            v = getattr(self, k)
            need(isinstance(v, int) and not isinstance(v, bool), f"{k} must be an integer, got {v!r}")
        for k in ("t_avg", "loss_rate", "eta", "tol"):
            v = getattr(self, k)
            need(isinstance(v, (int, float)) and not isinstance(v, bool), f"{k} must be a number, got {v!r}")
        need(self.M >= 1, "M must be at least 1")
        need(self.t_avg > 0, "t_avg must be positive")
        need(0.0 <= self.loss_rate < 1.0, "loss_rate must lie in [0, 1)")
        need(self.H >= 1, "H must be at least 1")
        if self.loss_rates is not None:
            need(isinstance(self.loss_rates, list) and len(self.loss_rates) == self.H,
                 "loss_rates must list one rate per hop")
            need(all(isinstance(p, (int, float)) and 0.0 <= p < 1.0 for p in self.loss_rates),
                 "loss_rates entries must lie in [0, 1)")
        need(self.t0 is None or (isinstance(self.t0, (int, float)) and self.t0 > 0), "t0 must be positive")
        need(self.N >= 1 and self.T >= 1 and self.L >= 1, "N, T and L must be positive")
        need(0.0 < self.eta < 1.0, "eta must lie in (0, 1)")
        need(self.tol > 0 and self.max_iter >= 1, "tol and max_iter must be positive")
        need(self.workers >= 1, "workers must be positive")
        need(self.experiment in ("fig1", "fig2"), f"experiment must be fig1 or fig2, got {self.experiment!r}")
        need(isinstance(self.sample_sizes, list) and all(isinstance(n, int) and n >= 1 for n in self.sample_sizes),
             "sample_sizes must be a list of positive integers")
        need(isinstance(self.links, list) and all(isinstance(k, int) and 1 <= k <= self.H for k in self.links),
             f"links must be integers in 1..{self.H}")
        need(isinstance(self.fig2_budgets, list) and all(isinstance(b, (int, float)) and b > 0
                                                          for b in self.fig2_budgets),
             "fig2_budgets must be positive numbers")

    def network(self, t_avg: float | None = None) -> LineNetwork:
        rates = self.loss_rates if self.loss_rates is not None else [self.loss_rate] * self.H
        return LineNetwork(hops=self.H, loss_rates=list(rates), M=self.M,
                           t_avg=float(self.t_avg if t_avg is None else t_avg), t0=self.t0)

    def trial_config(self) -> TrialConfig:
        return TrialConfig(N=self.N, trials=self.T, eta=self.eta, L=self.L, seed=self.seed,
                           tol=self.tol, max_iter=self.max_iter)


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    return RunConfig.from_dict(d)


def read_samples(path: str, M: int) -> np.ndarray:
    try:
        lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    except OSError as exc:
        raise ConfigError(f"cannot read samples {path}: {exc}") from None
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"samples file {path} is empty")
    try:
        vals = [int(ln) for ln in lines]
    except ValueError as exc:
        raise ConfigError(f"bad sample in {path}: {exc}") from None
    try:
        return as_samples(np.array(vals), M)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path: Path, cfg: RunConfig, command: str, outputs: list[str], failures: list) -> None:
    doc = {
        "command": command,
        "version": version_string(),
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "outputs": outputs,
        "failures": failures,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_calibrate(args, cfg: RunConfig) -> int:
    samples = read_samples(args.samples, cfg.M)
    h = empirical(samples, cfg.M)
    cal = calibrate_radius(h, samples.size, eta=cfg.eta, L=cfg.L, rng=np.random.default_rng(cfg.seed))
    print(f"rho {cal.rho!r}")
    print(f"quantile {cal.quantile!r}")
    print(f"eta {cal.eta}")
    print(f"L {cal.L}")
    print(f"N {cal.N}")
    print("empirical " + " ".join(f"{x:.6g}" for x in h))
    return EXIT_OK


def cmd_solve(args, cfg: RunConfig) -> int:
    samples = read_samples(args.samples, cfg.M)
    table = build_table(ChannelModel(cfg.loss_rate, cfg.M))
    h = empirical(samples, cfg.M)
    summary = {"method": args.method, "N": int(samples.size), "t_avg": cfg.t_avg}
    code = EXIT_OK
    if args.method == "saa-primal":
        t = solve_saa_greedy(h, table, cfg.t_avg)
        summary["objective"] = objective(h, table, t)
    elif args.method == "saa-lp":
        try:
            t = solve_saa_lp(h, table, cfg.t_avg, tol=cfg.tol, max_iter=cfg.max_iter)
        except SolverNotConverged as exc:
            log.error("%s", exc)
            return EXIT_SOLVER
        summary["objective"] = objective(h, table, t)
    else:
        if args.rho is not None:
            rho = args.rho
        else:
            rho = calibrate_radius(h, samples.size, eta=cfg.eta, L=cfg.L,
                                   rng=np.random.default_rng(cfg.seed)).rho
        sol = solve_dro(DroInstance(samples, table, rho, rho, cfg.t_avg), tol=cfg.tol, max_iter=cfg.max_iter)
        t = sol.t
        summary.update(rho=rho, objective=sol.objective, iterations=sol.report.iterations,
                       converged=sol.converged,
                       worst_case_utility=worst_case_utility(t, samples, table, rho),
                       worst_case_expectation=worst_case_expectation(t, samples, rho))
        if not sol.converged:
            code = EXIT_SOLVER
    write_policy(args.out, t)
    for k, v in summary.items():
        print(f"{k} {v}")
    return code


def cmd_experiment(args, cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.trial_config()
    outputs, failures = [], []
    if cfg.experiment == "fig1":
        net = cfg.network()
        for link in cfg.links:
            res = run_sample_size_experiment(net, tc, sample_sizes=tuple(cfg.sample_sizes), links=(link,),
                                             workers=cfg.workers)
            name = f"fig1_link{link}.csv"
            write_results(out / name, res)
            outputs.append(name)
            failures += [{"file": name, "method": r.method, "N": r.N, "trials": r.failed_trials}
                         for r in res if r.failures]
    else:
        for budget in cfg.fig2_budgets:
            res = run_hop_experiment(cfg.network(budget), tc, workers=cfg.workers)
            name = f"fig2_tavg{budget:g}.csv"
            write_results(out / name, res)
            outputs.append(name)
            failures += [{"file": name, "method": r.method, "hop": r.link_or_hop, "trials": r.failed_trials}
                         for r in res if r.failures]
    write_manifest(out / "manifest.json", cfg, f"experiment {cfg.experiment}", outputs, failures)
    for name in outputs:
        print(out / name)
    return EXIT_PARTIAL if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drorecode", description="Robust adaptive recoding tools")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (value parsed as JSON)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("solve", help="fit a recoding policy to rank samples")
    common(p)
    p.add_argument("samples", help="file with one integer rank per line")
    p.add_argument("--out", default="policy.txt")
    p.add_argument("--method", choices=("dro", "saa-lp", "saa-primal"), default="dro")
    p.add_argument("--rho", type=float, help="use this radius instead of calibrating")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("calibrate", help="report the calibrated Wasserstein radius")
    common(p)
    p.add_argument("samples")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("experiment", help="run the sample-size or hop-count experiment")
    common(p)
    p.add_argument("--select", choices=("fig1", "fig2"))
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "select", None):
        overrides.append(f"experiment={json.dumps(args.select)}")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "solve" and args.rho is not None and args.rho < 0:
            raise ConfigError("rho must be nonnegative")
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
