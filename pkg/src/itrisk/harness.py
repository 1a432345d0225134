"""Replicated simulation runs with CSV outputs.

A run draws ``reps`` independent instances, runs every configured solver on
each, and records the estimated and true risk curves, z-scores of debiased
coordinates and interval coverage.  Replications are distributed over a
process pool; every random draw comes from a ``(seed, rep, purpose)``
substream, so outputs do not depend on how reps are scheduled.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import scipy
from sklearn.exceptions import ConvergenceWarning
from threadpoolctl import threadpool_limits

from .errors import ConfigError, InvalidParameterError
from .inference import inference_report, risk_path
from .memory import DEFAULT_SKETCH_SIZE, METHODS, build_memory, weights
from .model import (
    FLOAT_FMT,
    LinearModelInstance,
    SimulationConfig,
    covariance_factor,
    generate_instance,
    minnorm_limit,
    true_risk,
    true_risk_path,
)
from .solvers import SolverConfig, ista_step, lipschitz_constant, run_trajectory

RISK_COLUMNS = ("rep", "algorithm", "t", "r_hat", "r_true", "r_infinity")
ZSCORE_COLUMNS = ("rep", "algorithm", "t", "j", "z")
COVERAGE_COLUMNS = ("algorithm", "t", "j", "coverage", "mean_width")
# the last default time is capped at T rather than dropped
DEFAULT_INFERENCE_TIMES = (5, 10, 50, 100)


class ExperimentError(RuntimeError):
    """A module error raised inside a replication, tagged with where it happened."""


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimulationConfig
    solvers: tuple
    reps: int = 1
    memory_method: str = "exact"
    m: int = DEFAULT_SKETCH_SIZE
    alpha: float = 0.05
    coordinates: tuple = (1,)
    inference_times: Optional[tuple] = None
    compute_limit_risk: bool = False
    lasso_tol: float = 1e-9
    lasso_max_iter: int = 100_000
    output_dir: str = "out"
    threads: int = 0

    def __post_init__(self):
        if not self.solvers:
            raise ConfigError("at least one solver is required")
        if int(self.reps) < 1:
            raise ConfigError("reps must be a positive integer")
        if self.memory_method not in METHODS:
            raise ConfigError(f"memory_method must be one of {METHODS}, got {self.memory_method!r}")
        if self.memory_method == "gd-closed" and any(s.algorithm != "GD" for s in self.solvers):
            raise ConfigError("the gd-closed memory method requires every solver to be GD")
        if int(self.m) < 1:
            raise ConfigError("sketch size m must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if int(self.threads) < 0:
            raise ConfigError("threads must be nonnegative")
        for j in self.coordinates:
            if not 1 <= int(j) <= self.sim.p:
                raise ConfigError(f"coordinate {j} outside [1, {self.sim.p}]")
        if self.inference_times is not None:
            T_min = min(s.T for s in self.solvers)
            bad = [t for t in self.inference_times if not 1 <= int(t) <= T_min]
            if bad:
                raise ConfigError(f"inference_times {bad} outside [1, {T_min}]")
        names = [s.name for s in self.solvers]
        if len(set(names)) != len(names):
            raise ConfigError(f"solver names must be unique, got {names}; set 'label' to disambiguate")

    def times_for(self, solver: SolverConfig):
        if self.inference_times is not None:
            return sorted({int(t) for t in self.inference_times})
        T = solver.T
        times = {t for t in DEFAULT_INFERENCE_TIMES[:-1] if t <= T}
        times.add(min(DEFAULT_INFERENCE_TIMES[-1], T))
        return sorted(times)

    @property
    def seed(self) -> int:
        return int(self.sim.seed)

    def to_dict(self):
        sim = {k: getattr(self.sim, k) for k in ("n", "p", "rho", "snr", "sigma2", "sparsity_fraction", "seed")}
        return {
            "sim": sim,
            "solvers": [s.to_dict() for s in self.solvers],
            "reps": self.reps,
            "memory_method": self.memory_method,
            "m": self.m,
            "alpha": self.alpha,
            "coordinates": list(self.coordinates),
            "inference_times": None if self.inference_times is None else list(self.inference_times),
            "compute_limit_risk": self.compute_limit_risk,
            "lasso_tol": self.lasso_tol,
            "lasso_max_iter": self.lasso_max_iter,
            "output_dir": self.output_dir,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, obj):
        """Build from the JSON schema documented in the README."""
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        try:
            sim = SimulationConfig(**obj.pop("sim"))
            solvers = tuple(SolverConfig.from_dict(s) for s in obj.pop("solvers"))
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc}") from exc
        except (TypeError, InvalidParameterError) as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("coordinates", "inference_times"):
            if obj.get(key) is not None:
                obj[key] = tuple(int(v) for v in obj[key])
        try:
            return cls(sim=sim, solvers=solvers, **obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(obj)

    def with_overrides(self, seed=None, threads=None, output_dir=None, memory_method=None, m=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, seed=int(seed)))
        kw = {k: v for k, v in dict(threads=threads, output_dir=output_dir, memory_method=memory_method, m=m).items() if v is not None}
        return replace(cfg, **kw) if kw else cfg


@dataclass
class RunOutputs:
    risk_curve: List[tuple] = field(default_factory=list)
    zscores: List[tuple] = field(default_factory=list)
    coverage: List[tuple] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


# -- limits -----------------------------------------------------------------------


def lasso_limit(instance: LinearModelInstance, lam: float, tol: float = 1e-9, max_iter: int = 100_000, return_info: bool = False):
    """Run ISTA from zero until ``||b^t - b^{t-1}|| <= tol * max(1, ||b^t||)``.

    Returns ``(b, r_inf)`` with ``r_inf`` the true risk of the limit (``None``
    without truth).  Hitting ``max_iter`` issues a ``ConvergenceWarning``
    instead of failing; ``return_info=True`` appends a dict with
    ``converged`` and ``iterations``.
    """
    if lam < 0:
        raise InvalidParameterError("lambda must be nonnegative")
    X, y = instance.X, instance.y
    n = X.shape[0]
    L = lipschitz_constant(X)
    if L == 0:
        raise InvalidParameterError("design matrix is zero; the Lipschitz constant vanishes")
    b = np.zeros(X.shape[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = X.T @ (y - X @ b) / n
        b_new, _ = ista_step(b, v, L, lam)
        step = np.linalg.norm(b_new - b)
        b = b_new
        if step <= tol * max(1.0, np.linalg.norm(b)):
            converged = True
            break
    if not converged:
        warnings.warn(f"lasso_limit did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    r_inf = true_risk(b, instance.truth) if instance.truth is not None else None
    if return_info:
        return b, r_inf, {"converged": converged, "iterations": it}
    return b, r_inf


# -- one replication --------------------------------------------------------------


def _run_rep(cfg: ExperimentConfig, rep: int):
    # single BLAS thread keeps floating-point reductions independent of the pool size
    with threadpool_limits(limits=1):
        return _run_rep_inner(cfg, rep)


def _run_rep_inner(cfg: ExperimentConfig, rep: int):
    inst = generate_instance(cfg.sim, rep)
    truth = inst.truth
    factor = covariance_factor(truth.Sigma)
    n = inst.n
    risk_rows, z_rows, cover = [], [], []
    notes = []
    limits = {}
    for solver in cfg.solvers:
        name = solver.name
        try:
            traj = run_trajectory(inst, solver)
            mem = build_memory(traj, inst.X, method=cfg.memory_method, m=cfg.m, seed=cfg.seed, rep=rep)
            W = weights(mem, n)
            r_hat = risk_path(traj.F, W)
            r_true = true_risk_path(traj.B, truth)
            r_inf = None
            if cfg.compute_limit_risk:
                r_inf = _limit_risk(cfg, inst, solver, limits, notes)
            for t in range(1, traj.T + 1):
                risk_rows.append((rep, name, t, float(r_hat[t - 1]), float(r_true[t - 1]), r_inf))
            rep_inf = inference_report(
                traj,
                W,
                truth.Sigma,
                cfg.times_for(solver),
                cfg.coordinates,
                alpha=cfg.alpha,
                b_star=truth.b_star,
                r_hat=r_hat,
                factor=factor,
            )
            for e in rep_inf.entries:
                z_rows.append((rep, name, e.t, e.j, e.z))
                cover.append((name, e.t, e.j, bool(e.covered), e.width))
        except Exception as exc:
            raise ExperimentError(f"rep {rep}, algorithm {name}: {type(exc).__name__}: {exc}") from exc
    return risk_rows, z_rows, cover, notes


def _limit_risk(cfg, inst, solver, cache, notes):
    algo = solver.algorithm
    if algo in ("GD", "AGD"):
        key = ("minnorm",)
        if key not in cache:
            if inst.n == inst.p:
                notes.append("n = p: the min-norm limit risk can be extremely large")
            cache[key] = minnorm_limit(inst.X, inst.y, inst.truth)[1]
        return cache[key]
    if algo in ("ISTA", "FISTA"):
        key = ("lasso", solver.lam)
        if key not in cache:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConvergenceWarning)
                cache[key] = lasso_limit(inst, solver.lam, tol=cfg.lasso_tol, max_iter=cfg.lasso_max_iter)[1]
            if caught:
                notes.append(f"lasso limit for lambda={solver.lam:g} did not converge")
        return cache[key]
    return None


# -- driver ---------------------------------------------------------------------


def _resolve_workers(threads: int) -> int:
    if threads == 0:
        return os.cpu_count() or 1
    return int(threads)


def run_experiment(cfg: ExperimentConfig) -> RunOutputs:
    """Run every replication and aggregate; deterministic in ``cfg`` apart from the manifest timing."""
    start = time.perf_counter()
    workers = min(_resolve_workers(cfg.threads), cfg.reps)
    reps = range(cfg.reps)
    if workers <= 1:
        results = [_run_rep(cfg, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_rep, [cfg] * cfg.reps, reps))

    order = {s.name: k for k, s in enumerate(cfg.solvers)}
    risk_rows, z_rows, cover, notes = [], [], [], []
    for rr, zr, cv, nt in results:
        risk_rows.extend(rr)
        z_rows.extend(zr)
        cover.extend(cv)
        notes.extend(nt)
    risk_rows.sort(key=lambda r: (r[0], order[r[1]], r[2]))
    z_rows.sort(key=lambda r: (r[0], order[r[1]], r[2], r[3]))

    groups = {}
    for name, t, j, covered, width in cover:
        groups.setdefault((order[name], name, t, j), []).append((covered, width))
    coverage_rows = []
    for (_, name, t, j), vals in sorted(groups.items()):
        cov = math.fsum(c for c, _ in vals) / len(vals)
        width = math.fsum(w for _, w in vals) / len(vals)
        coverage_rows.append((name, t, j, cov, width))

    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "threads": workers,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "itrisk": _package_version(),
        },
        "warnings": sorted(set(notes)),
        "wall_time_seconds": time.perf_counter() - start,
    }
    return RunOutputs(risk_curve=risk_rows, zscores=z_rows, coverage=coverage_rows, manifest=manifest)


def _package_version():
    from . import __version__

    return __version__


# -- serialization ----------------------------------------------------------------


def format_value(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def _write_table(path, header, rows):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([format_value(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_csv(outputs: RunOutputs, directory) -> List[str]:
    """Write the three tables and ``manifest.json``; returns the written paths."""
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    paths = []
    for fname, header, rows in (
        ("risk_curve.csv", RISK_COLUMNS, outputs.risk_curve),
        ("zscores.csv", ZSCORE_COLUMNS, outputs.zscores),
        ("coverage.csv", COVERAGE_COLUMNS, outputs.coverage),
    ):
        path = os.path.join(directory, fname)
        _write_table(path, header, rows)
        paths.append(path)
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(outputs.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    paths.append(path)
    return paths


def read_risk_curve(path):
    """Parse ``risk_curve.csv`` back into typed tuples (empty fields become ``None``)."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RISK_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        for rec in reader:
            rows.append(
                (
                    int(rec[0]),
                    rec[1],
                    int(rec[2]),
                    float(rec[3]),
                    float(rec[4]) if rec[4] else None,
                    float(rec[5]) if rec[5] else None,
                )
            )
    return rows
