"""Linear model instances, synthetic generation and ground-truth risks.

The synthetic design follows the usual high-dimensional benchmark: rows of
``X`` are i.i.d. ``N(0, Sigma)`` with an AR(1) covariance, the noise is
i.i.d. ``N(0, sigma2)`` and the coefficient vector has a block of equal
positive entries at the front, scaled to a target signal-to-noise ratio.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InvalidParameterError, NotPositiveDefiniteError, TruthRequiredError

# Default upper bound on n * p for generated designs (8 bytes each).
MAX_DESIGN_ENTRIES = 200_000_000

# Named purposes for random substreams; values are part of the
# reproducibility contract and must never be renumbered.
STREAM_DESIGN = 0
STREAM_NOISE = 1
STREAM_SKETCH = 2


def substream(seed: int, rep: int, purpose: int) -> np.random.Generator:
    """Return the generator for ``(rep, purpose)`` under a master ``seed``.

    Streams come from ``SeedSequence(seed, spawn_key=(rep, purpose))`` feeding a
    Philox counter-based bit generator, so any replication can be regenerated
    on its own regardless of how work is distributed.
    """
    if seed < 0 or seed >= 2**64:
        raise InvalidParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(rep), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Truth:
    b_star: np.ndarray
    Sigma: np.ndarray
    sigma2: float
    epsilon: Optional[np.ndarray] = None
    rho: Optional[float] = None


@dataclass(frozen=True)
class LinearModelInstance:
    """Design ``X`` (n x p), response ``y`` and optional ground truth."""

    X: np.ndarray
    y: np.ndarray
    truth: Optional[Truth] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-dimensional, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        if self.truth is not None:
            p = X.shape[1]
            if self.truth.b_star.shape != (p,) or self.truth.Sigma.shape != (p, p):
                raise ValueError("truth dimensions do not match X")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SimulationConfig:
    n: int
    p: int
    rho: float = 0.5
    snr: float = 5.0
    sigma2: float = 1.0
    sparsity_fraction: float = 1 / 20
    seed: int = 0
    max_entries: int = field(default=MAX_DESIGN_ENTRIES, compare=False)

    def __post_init__(self):
        if int(self.n) < 1 or int(self.p) < 1:
            raise InvalidParameterError("n and p must be positive integers")
        if not 0.0 <= self.rho < 1.0:
            raise InvalidParameterError(f"rho must lie in [0, 1), got {self.rho}")
        if self.snr <= 0 or self.sigma2 <= 0:
            raise InvalidParameterError("snr and sigma2 must be positive")
        if not 0.0 < self.sparsity_fraction <= 1.0:
            raise InvalidParameterError("sparsity_fraction must lie in (0, 1]")
        if self.n * self.p > self.max_entries:
            raise InvalidParameterError(
                f"n*p = {self.n * self.p} exceeds the memory cap of {self.max_entries} entries"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError("seed must be a 64-bit unsigned integer")

    @property
    def support_size(self) -> int:
        # rounding guards against 0.05 * 1500 = 75.00000000000001
        return max(1, math.ceil(round(self.sparsity_fraction * self.p, 9)))


def ar1_covariance(p: int, rho: float) -> np.ndarray:
    """AR(1) covariance ``Sigma[j, k] = rho ** |j - k|`` (with ``0 ** 0 = 1``)."""
    if p < 1:
        raise InvalidParameterError(f"p must be positive, got {p}")
    if not 0.0 <= rho < 1.0:
        raise InvalidParameterError(f"rho must lie in [0, 1), got {rho}")
    lags = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    # numpy evaluates 0.0 ** 0 as 1.0
    return np.power(float(rho), lags)


def covariance_factor(Sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``S`` with ``S @ S.T == Sigma``."""
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("Sigma must be a square matrix")
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("Sigma is not positive definite") from exc


def sigma_inv_column(Sigma: np.ndarray, j: int, factor: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``Sigma x = e_j`` (``j`` 1-based) through the Cholesky factor."""
    p = Sigma.shape[0]
    if not 1 <= j <= p:
        raise IndexError(f"coordinate {j} outside [1, {p}]")
    S = covariance_factor(Sigma) if factor is None else factor
    e = np.zeros(p)
    e[j - 1] = 1.0
    return scipy.linalg.cho_solve((S, True), e)


def generate_instance(cfg: SimulationConfig, rep: int = 0) -> LinearModelInstance:
    """Draw one synthetic instance; deterministic in ``(cfg.seed, rep)``."""
    Sigma = ar1_covariance(cfg.p, cfg.rho)
    S = covariance_factor(Sigma)
    Z = substream(cfg.seed, rep, STREAM_DESIGN).standard_normal((cfg.n, cfg.p))
    X = Z @ S.T
    eps = math.sqrt(cfg.sigma2) * substream(cfg.seed, rep, STREAM_NOISE).standard_normal(cfg.n)

    k = cfg.support_size
    # 1' Sigma_SS 1 for the leading block
    quad = float(Sigma[:k, :k].sum())
    c = math.sqrt(cfg.snr * cfg.sigma2 / quad)
    b_star = np.zeros(cfg.p)
    b_star[:k] = c

    y = X @ b_star + eps
    truth = Truth(b_star=b_star, Sigma=Sigma, sigma2=float(cfg.sigma2), epsilon=eps, rho=float(cfg.rho))
    return LinearModelInstance(X=X, y=y, truth=truth)


def _require_truth(truth):
    if truth is None:
        raise TruthRequiredError("ground truth is required for this quantity")
    return truth


def true_risk(b_t: np.ndarray, truth: Optional[Truth]) -> float:
    """Out-of-sample squared prediction error ``||Sigma^{1/2}(b - b*)||^2 + sigma^2``."""
    truth = _require_truth(truth)
    d = np.asarray(b_t, dtype=float) - truth.b_star
    return float(d @ truth.Sigma @ d) + truth.sigma2


def true_cross_risk(b_t: np.ndarray, b_s: np.ndarray, truth: Optional[Truth]) -> float:
    truth = _require_truth(truth)
    dt = np.asarray(b_t, dtype=float) - truth.b_star
    ds = np.asarray(b_s, dtype=float) - truth.b_star
    # symmetrized so that swapping the arguments is bit-identical
    return 0.5 * float(dt @ truth.Sigma @ ds + ds @ truth.Sigma @ dt) + truth.sigma2


def true_risk_path(B: np.ndarray, truth: Optional[Truth]) -> np.ndarray:
    """``true_risk`` for every column of a p x T iterate matrix."""
    truth = _require_truth(truth)
    H = B - truth.b_star[:, None]
    return np.einsum("it,it->t", H, truth.Sigma @ H) + truth.sigma2


def pinv_cutoff(s: np.ndarray, shape) -> float:
    if s.size == 0:
        return 0.0
    return max(shape) * np.finfo(float).eps * float(s.max())


def minnorm_limit(X: np.ndarray, y: np.ndarray, truth: Optional[Truth] = None):
    """Minimum-norm least-squares solution and, with truth, its risk.

    Returns ``(b_tilde, r_inf)`` where ``r_inf`` is ``None`` without truth.
    Singular values below ``max(n, p) * eps * s_max`` are treated as zero.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    keep = s > pinv_cutoff(s, X.shape)
    coef = (U[:, keep].T @ y) / s[keep]
    b_tilde = Vt[keep].T @ coef
    r_inf = true_risk(b_tilde, truth) if truth is not None else None
    return b_tilde, r_inf


# -- CSV / JSON exchange -----------------------------------------------------

FLOAT_FMT = "%.17g"


def save_instance(instance: LinearModelInstance, directory) -> None:
    """Write ``X.csv``, ``y.csv`` and, when known, ``truth.json``."""
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "X.csv"), instance.X, fmt=FLOAT_FMT, delimiter=",")
    np.savetxt(os.path.join(directory, "y.csv"), instance.y[:, None], fmt=FLOAT_FMT, delimiter=",")
    if instance.truth is not None:
        t = instance.truth
        payload = {
            "b_star": [float(v) for v in t.b_star],
            "sigma2": t.sigma2,
            "rho": t.rho,
        }
        with open(os.path.join(directory, "truth.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh)


def load_instance(directory) -> LinearModelInstance:
    """Inverse of :func:`save_instance`.

    The noise vector is recomputed as ``y - X b*``; ``Sigma`` is rebuilt from
    ``rho`` and falls back to the identity when ``rho`` is absent.
    """
    X = np.loadtxt(os.path.join(directory, "X.csv"), delimiter=",", ndmin=2)
    y = np.loadtxt(os.path.join(directory, "y.csv"), delimiter=",", ndmin=1)
    truth = None
    tpath = os.path.join(directory, "truth.json")
    if os.path.exists(tpath):
        with open(tpath, encoding="utf-8") as fh:
            payload = json.load(fh)
        b_star = np.asarray(payload["b_star"], dtype=float)
        rho = payload.get("rho")
        Sigma = ar1_covariance(X.shape[1], rho) if rho is not None else np.eye(X.shape[1])
        truth = Truth(
            b_star=b_star,
            Sigma=Sigma,
            sigma2=float(payload["sigma2"]),
            epsilon=y - X @ b_star,
            rho=rho,
        )
    return LinearModelInstance(X=X, y=y, truth=truth)
