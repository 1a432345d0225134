"""First-order solvers for least squares, Lasso and MCP with exact Jacobians.

Every solver is written as an iteration ``b^t = g_t(b^{t-1}, b^{t-2}, v^{t-1}, v^{t-2})``
with ``v^t = X^T (y - X b^t) / n``, starting from ``b^1 = 0`` and the convention
``b^0 = v^0 = 0``.  Alongside each new iterate a step function returns the
partial derivatives of ``g_t`` with respect to the previous iterates (``J``
blocks) and previous gradient vectors (``D`` blocks), stored in compact form.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Union

import numpy as np

from .errors import InvalidParameterError
from .model import FLOAT_FMT, LinearModelInstance

ALGORITHMS = ("GD", "AGD", "ISTA", "FISTA", "LQA_MCP")
_ALIASES = {"LQA": "LQA_MCP", "MCP": "LQA_MCP", "LQA-MCP": "LQA_MCP"}

# Inflation applied to the power-iteration estimate of ||X^T X / n||_op.
LIPSCHITZ_INFLATION = 1e-8


# -- Jacobian blocks -----------------------------------------------------------


@dataclass(frozen=True)
class ScaledIdentity:
    c: float
    kind = "scaled_identity"

    def matmul(self, M):
        return self.c * M

    def diagonal(self, p):
        return np.full(p, float(self.c))

    def to_dense(self, p):
        return self.c * np.eye(p)

    def payload(self):
        return {"kind": self.kind, "c": float(self.c)}


@dataclass(frozen=True, eq=False)
class DiagonalMask:
    """Diagonal block ``diag(d)``; for the shipped solvers ``d`` is a scaled 0/1 mask."""

    d: np.ndarray
    kind = "diagonal"

    def matmul(self, M):
        return self.d[:, None] * M if np.ndim(M) == 2 else self.d * M

    def diagonal(self, p):
        return self.d

    def to_dense(self, p):
        return np.diag(self.d)

    def payload(self):
        return {"kind": self.kind, "d": [float(x) for x in self.d]}


@dataclass(frozen=True, eq=False)
class Dense:
    M: np.ndarray
    kind = "dense"

    def matmul(self, M):
        return self.M @ M

    def diagonal(self, p):
        return np.diag(self.M).copy()

    def to_dense(self, p):
        return self.M

    def payload(self):
        return {"kind": self.kind, "M": np.asarray(self.M).tolist()}


JacobianBlock = Union[ScaledIdentity, DiagonalMask, Dense]


def block_from_payload(obj) -> JacobianBlock:
    kind = obj["kind"]
    if kind == ScaledIdentity.kind:
        return ScaledIdentity(float(obj["c"]))
    if kind == DiagonalMask.kind:
        return DiagonalMask(np.asarray(obj["d"], dtype=float))
    if kind == Dense.kind:
        return Dense(np.asarray(obj["M"], dtype=float))
    raise ValueError(f"unknown block kind {kind!r}")


@dataclass(frozen=True)
class StepJacobians:
    """Blocks ``J_{t,t-1}, D_{t,t-1}`` and, for two-lag methods, ``J_{t,t-2}, D_{t,t-2}``."""

    J_prev: JacobianBlock
    D_prev: JacobianBlock
    J_prev2: Optional[JacobianBlock] = None
    D_prev2: Optional[JacobianBlock] = None
    t: Optional[int] = None

    def lags(self):
        """Yield ``(lag, J, D)`` for every recorded lag."""
        yield 1, self.J_prev, self.D_prev
        if self.J_prev2 is not None:
            yield 2, self.J_prev2, self.D_prev2

    def payload(self):
        out = {"t": self.t, "J_prev": self.J_prev.payload(), "D_prev": self.D_prev.payload()}
        if self.J_prev2 is not None:
            out["J_prev2"] = self.J_prev2.payload()
            out["D_prev2"] = self.D_prev2.payload()
        return out

    @classmethod
    def from_payload(cls, obj):
        two = "J_prev2" in obj
        return cls(
            J_prev=block_from_payload(obj["J_prev"]),
            D_prev=block_from_payload(obj["D_prev"]),
            J_prev2=block_from_payload(obj["J_prev2"]) if two else None,
            D_prev2=block_from_payload(obj["D_prev2"]) if two else None,
            t=obj.get("t"),
        )


# -- scalar helpers --------------------------------------------------------------


def lipschitz_constant(X, tol: float = 1e-10, max_iter: int = 1000) -> float:
    """Upper bound on ``||X^T X / n||_op`` by power iteration.

    Starts from the normalized all-ones vector and stops when the Rayleigh
    quotient changes by less than ``tol`` relatively.  If the cap is reached
    the value is taken from a dense SVD instead.  The result is inflated by
    ``1 + 1e-8``.  Returns 0 for the zero matrix.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if not np.any(X):
        return 0.0
    v = np.full(p, 1.0 / math.sqrt(p))
    lam_old = None
    lam = None
    for _ in range(max_iter):
        w = X.T @ (X @ v) / n
        lam = float(v @ w)
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            lam = None
            break
        v = w / nrm
        if lam_old is not None and abs(lam - lam_old) <= tol * abs(lam):
            break
        lam_old = lam
    else:
        lam = None
    if lam is None:
        lam = float(np.linalg.norm(X, 2)) ** 2 / n
    return lam * (1.0 + LIPSCHITZ_INFLATION)


def soft_threshold(u, theta):
    """Elementwise ``sign(u) * max(|u| - theta, 0)``."""
    if np.any(np.asarray(theta) < 0):
        raise InvalidParameterError("threshold must be nonnegative")
    out = np.sign(u) * np.maximum(np.abs(u) - theta, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def momentum_sequence(T: int):
    """Momentum scalars ``a_0..a_T`` and weights ``w_1..w_T``.

    ``a_0 = 0``, ``a_t = (1 + sqrt(1 + 4 a_{t-1}^2)) / 2`` and
    ``w_t = (1 - a_t) / a_{t+1}``.  ``w[k]`` holds ``w_{k+1}``.
    """
    if T < 1:
        raise InvalidParameterError("T must be at least 1")
    a = np.zeros(T + 2)
    for t in range(1, T + 2):
        a[t] = (1.0 + math.sqrt(1.0 + 4.0 * a[t - 1] ** 2)) / 2.0
    w = (1.0 - a[1 : T + 1]) / a[2 : T + 2]
    return a[: T + 1], w


# -- step maps ------------------------------------------------------------------------


def gd_step(b_prev, v_prev, eta):
    """``b^t = b^{t-1} + eta v^{t-1}``."""
    b = b_prev + eta * v_prev
    return b, StepJacobians(J_prev=ScaledIdentity(1.0), D_prev=ScaledIdentity(float(eta)))


def agd_step(b_prev, b_prev2, v_prev, v_prev2, eta, w):
    """Nesterov step mixing the two previous gradient steps with weight ``w = w_{t-1}``.

    Pass ``b_prev2 = v_prev2 = None`` at ``t = 2``; the lag-2 blocks are then
    omitted since ``b^0`` is a constant.
    """
    if b_prev2 is None:
        b_prev2 = np.zeros_like(b_prev)
        v_prev2 = np.zeros_like(v_prev)
        lag2 = False
    else:
        lag2 = True
    b = (1.0 - w) * (b_prev + eta * v_prev) + w * (b_prev2 + eta * v_prev2)
    jac = StepJacobians(
        J_prev=ScaledIdentity(1.0 - w),
        D_prev=ScaledIdentity(eta * (1.0 - w)),
        J_prev2=ScaledIdentity(float(w)) if lag2 else None,
        D_prev2=ScaledIdentity(eta * w) if lag2 else None,
    )
    return b, jac


def _support(u, theta):
    # strict inequality; ties at the kink get derivative 0
    return (np.abs(u) > theta).astype(float)


def ista_step(b_prev, v_prev, L, lam):
    """``b^t = soft_{lam/L}(b^{t-1} + v^{t-1}/L)``."""
    u = b_prev + v_prev / L
    theta = lam / L
    mask = _support(u, theta)
    J = DiagonalMask(mask)
    return soft_threshold(u, theta), StepJacobians(J_prev=J, D_prev=DiagonalMask(mask / L))


def fista_step(b_prev, b_prev2, v_prev, v_prev2, L, lam, w):
    if b_prev2 is None:
        b, jac = ista_step(b_prev, v_prev, L, lam)
        if w != 0.0:
            b = (1.0 - w) * b
            jac = StepJacobians(
                J_prev=DiagonalMask((1.0 - w) * jac.J_prev.d),
                D_prev=DiagonalMask((1.0 - w) * jac.D_prev.d),
            )
        return b, jac
    theta = lam / L
    u1 = b_prev + v_prev / L
    u2 = b_prev2 + v_prev2 / L
    m1 = (1.0 - w) * _support(u1, theta)
    m2 = w * _support(u2, theta)
    b = (1.0 - w) * soft_threshold(u1, theta) + w * soft_threshold(u2, theta)
    jac = StepJacobians(
        J_prev=DiagonalMask(m1),
        D_prev=DiagonalMask(m1 / L),
        J_prev2=DiagonalMask(m2),
        D_prev2=DiagonalMask(m2 / L),
    )
    return b, jac


def lqa_mcp_step(b_prev, v_prev, L, lam, tau):
    """Closed-form MCP step under the isotropic quadratic surrogate.

    Requires ``tau * L > 1``; inside ``|u| <= tau*lam`` the soft-thresholded
    value is inflated by ``(1 - 1/(tau L))^{-1}``, outside it ``u`` is kept.
    """
    if tau * L <= 1.0:
        raise InvalidParameterError(f"LQA-MCP needs tau*L > 1, got tau*L = {tau * L}")
    u = b_prev + v_prev / L
    a = np.abs(u)
    theta = lam / L
    scale = 1.0 / (1.0 - 1.0 / (tau * L))
    inner = a <= tau * lam
    b = np.where(inner, soft_threshold(u, theta) * scale, u)
    d = np.where(inner, np.where(a > theta, scale, 0.0), 1.0)
    return b, StepJacobians(J_prev=DiagonalMask(d), D_prev=DiagonalMask(d / L))


# -- configuration and trajectories ----------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    """Solver choice and tuning.

    ``eta`` is the gradient step (default ``1/L``); the proximal methods use
    step ``1/L`` and interpret a supplied ``eta`` as ``L = 1/eta``.
    """

    algorithm: str
    T: int = 100
    eta: Optional[float] = None
    lam: float = 0.0
    tau: Optional[float] = None
    label: Optional[str] = None

    def __post_init__(self):
        algo = str(self.algorithm).upper()
        algo = _ALIASES.get(algo, algo)
        if algo not in ALGORITHMS:
            raise InvalidParameterError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        object.__setattr__(self, "algorithm", algo)
        if int(self.T) < 1:
            raise InvalidParameterError("T must be a positive integer")
        object.__setattr__(self, "T", int(self.T))
        if self.eta is not None and not self.eta > 0:
            raise InvalidParameterError("eta must be positive")
        if self.lam < 0:
            raise InvalidParameterError("lambda must be nonnegative")
        if algo == "LQA_MCP" and (self.tau is None or not self.tau > 0):
            raise InvalidParameterError("LQA_MCP requires tau > 0")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        parts = [self.algorithm]
        if self.algorithm in ("ISTA", "FISTA", "LQA_MCP"):
            parts.append(f"lambda={self.lam:g}")
        if self.algorithm == "LQA_MCP":
            parts.append(f"tau={self.tau:g}")
        return "_".join(parts)

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "T": self.T,
            "eta": self.eta,
            "lambda": self.lam,
            "tau": self.tau,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        allowed = {"algorithm", "T", "eta", "lam", "tau", "label"}
        unknown = set(obj) - allowed
        if unknown:
            raise InvalidParameterError(f"unknown solver fields {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Iterates ``B`` (p x T), residuals ``F`` (n x T), gradients ``V`` (p x T).

    ``steps[k]`` holds the Jacobian blocks of the step producing iterate
    ``t = k + 2``.
    """

    B: np.ndarray
    F: np.ndarray
    V: np.ndarray
    steps: List[StepJacobians]
    L: float
    eta: float
    config: SolverConfig

    @property
    def T(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[0]

    def iterate(self, t: int) -> np.ndarray:
        """Iterate ``b^t`` (1-based)."""
        return self.B[:, t - 1]


def _unpack(data, y=None):
    if isinstance(data, LinearModelInstance):
        return data.X, data.y
    return np.asarray(data, dtype=float), np.asarray(y, dtype=float)


def resolve_step(X, config: SolverConfig):
    """Return ``(L, eta)`` for ``config`` on design ``X``."""
    L = lipschitz_constant(X)
    algo = config.algorithm
    if config.eta is None:
        if L <= 0:
            raise InvalidParameterError("design has zero operator norm; step size 1/L undefined")
        eta = 1.0 / L
    else:
        eta = float(config.eta)
        if L > 0 and eta >= 2.0 / L:
            raise InvalidParameterError(f"eta = {eta} must lie in (0, 2/L) with L = {L}")
    if algo in ("ISTA", "FISTA", "LQA_MCP"):
        L_step = 1.0 / eta
    else:
        L_step = L
    if algo == "LQA_MCP" and config.tau * L_step <= 1.0:
        raise InvalidParameterError(f"LQA_MCP requires tau*L > 1, got {config.tau * L_step}")
    return L_step, eta


def run_trajectory(data, config: SolverConfig, y=None) -> Trajectory:
    """Run ``config.T`` iterates from ``b^1 = 0``.

    ``data`` is a :class:`LinearModelInstance` or a design matrix (then pass
    ``y``).
    """
    X, y = _unpack(data, y)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    L, eta = resolve_step(X, config)
    T = config.T
    _, w = momentum_sequence(T)
    algo = config.algorithm

    B = np.zeros((p, T))
    F = np.zeros((n, T))
    V = np.zeros((p, T))
    F[:, 0] = y
    V[:, 0] = X.T @ y / n
    steps = []
    for t in range(2, T + 1):
        b1, v1 = B[:, t - 2], V[:, t - 2]
        b2 = B[:, t - 3] if t >= 3 else None
        v2 = V[:, t - 3] if t >= 3 else None
        wt = w[t - 2]  # w_{t-1}
        if algo == "GD":
            b, jac = gd_step(b1, v1, eta)
        elif algo == "AGD":
            b, jac = agd_step(b1, b2, v1, v2, eta, wt)
        elif algo == "ISTA":
            b, jac = ista_step(b1, v1, L, config.lam)
        elif algo == "FISTA":
            b, jac = fista_step(b1, b2, v1, v2, L, config.lam, wt)
        else:
            b, jac = lqa_mcp_step(b1, v1, L, config.lam, config.tau)
        B[:, t - 1] = b
        F[:, t - 1] = y - X @ b
        V[:, t - 1] = X.T @ F[:, t - 1] / n
        steps.append(replace(jac, t=t))
    for arr in (B, F, V):
        arr.flags.writeable = False
    return Trajectory(B=B, F=F, V=V, steps=steps, L=L, eta=eta, config=config)


def lasso_objective(b, X, y, lam) -> float:
    r = y - X @ b
    return float(r @ r) / (2 * X.shape[0]) + lam * float(np.abs(b).sum())


def save_trajectory(traj: Trajectory, directory) -> None:
    """Write ``B.csv``, ``F.csv`` (columns = iterations) and ``steps.json``."""
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "B.csv"), traj.B, fmt=FLOAT_FMT, delimiter=",")
    np.savetxt(os.path.join(directory, "F.csv"), traj.F, fmt=FLOAT_FMT, delimiter=",")
    payload = {
        "config": traj.config.to_dict(),
        "L": traj.L,
        "eta": traj.eta,
        "steps": [s.payload() for s in traj.steps],
    }
    with open(os.path.join(directory, "steps.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_steps(path) -> List[StepJacobians]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [StepJacobians.from_payload(s) for s in payload["steps"]]
