"""Memory matrix of an iterate trajectory and the derived weight matrices.

For iterates with Jacobian blocks ``J_{t,s}``, ``D_{t,s}`` the memory matrix is

    A[t, t'] = trace(X R_{t,t'} X^T) / n = trace(G R_{t,t'}),   G = X^T X / n,

where the block rows ``R_t`` solve the block forward substitution

    R_t = sum_s e_s^T (x) D_{t,s} + sum_s (J_{t,s} - D_{t,s} G) R_s.

Two exact evaluators are provided.  When every block is a multiple of the
identity all ``R_{t,t'}`` are polynomials in ``G`` and the recursion runs on
its eigenvalues.  Otherwise ``R_t`` is stored densely but restricted to its
nonzero rows and to the columns where some ``D`` block is nonzero, which is
what keeps the soft-thresholding solvers cheap.  A Hutchinson sketch replaces
the traces by ``trace(W^T X R X^T W)`` for a single ``n x m`` sign matrix.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import IncompleteTrajectoryError, InvalidParameterError
from .model import FLOAT_FMT, STREAM_SKETCH, substream
from .solvers import DiagonalMask, ScaledIdentity, Trajectory

METHODS = ("exact", "gd-closed", "hutchinson")
DEFAULT_SKETCH_SIZE = 3


@dataclass(frozen=True, eq=False)
class MemoryMatrix:
    A_hat: np.ndarray
    method: str
    m: Optional[int] = None
    seed: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        A = self.A_hat
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("memory matrix must be square")
        if np.any(np.triu(A) != 0):
            raise ValueError("memory matrix must be strictly lower triangular")

    @property
    def T(self) -> int:
        return self.A_hat.shape[0]


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """``W_hat = (I - A/n)^{-1}``; ``C_check`` holds the Sigma-aware alternative."""

    W_hat: np.ndarray
    C_check: Optional[np.ndarray] = None


def _check_steps(traj: Trajectory):
    steps = traj.steps
    if len(steps) != traj.T - 1 or any(rec.t != k + 2 for k, rec in enumerate(steps)):
        raise IncompleteTrajectoryError(
            f"trajectory with T={traj.T} needs step records for t=2..{traj.T}, got {len(steps)}"
        )
    return steps


def _all_scaled_identity(steps) -> bool:
    return all(isinstance(B, ScaledIdentity) for rec in steps for _, J, D in rec.lags() for B in (J, D))


def _nonzero_index(block, p, axis):
    """Indices of rows (axis=0) or columns (axis=1) where ``block`` is nonzero."""
    if isinstance(block, ScaledIdentity):
        return np.arange(p) if block.c != 0 else np.arange(0)
    if isinstance(block, DiagonalMask):
        return np.flatnonzero(block.d)
    return np.flatnonzero(np.any(block.M != 0, axis=1 - axis))


# -- exact evaluators -------------------------------------------------------------


def _spectral_recursion(steps, T, eigvals, sigma_diag=None, n=None):
    """Exact recursion when all blocks are ``c * I``.

    ``R_{t,t'}`` is diagonal in the eigenbasis of ``G``; ``R[t]`` stores its
    coefficients as a ``(t-1, k)`` array.  ``sigma_diag`` is the diagonal of
    ``U^T Sigma U`` for the alternative weights.
    """
    A = np.zeros((T, T))
    C = np.eye(T) if sigma_diag is not None else None
    k = eigvals.size
    R = {1: np.zeros((0, k))}
    for t in range(2, T + 1):
        rec = steps[t - 2]
        Rt = np.zeros((t - 1, k))
        for lag, J, D in rec.lags():
            s = t - lag
            if s < 1:
                continue
            if s >= 2:
                Rt[: s - 1] += (J.c - D.c * eigvals) * R[s]
            Rt[s - 1] += D.c
        A[t - 1, : t - 1] = Rt @ eigvals
        if C is not None:
            C[t - 1, : t - 1] = Rt @ sigma_diag / n
        R[t] = Rt
        R.pop(t - 2, None)
    return A, C


class _ColumnLayout:
    """Global column layout of the compressed ``R_t``: block ``s`` keeps ``cols[s]``."""

    def __init__(self, steps, T, p):
        self.cols = {}
        for s in range(1, T):
            parts = []
            for rec in steps[s - 1 : s + 1]:
                for lag, _, D in rec.lags():
                    if rec.t - lag == s:
                        parts.append(_nonzero_index(D, p, axis=1))
            self.cols[s] = np.unique(np.concatenate(parts)) if parts else np.arange(0)
        self.off = {1: 0}
        for s in range(1, T):
            self.off[s + 1] = self.off[s] + self.cols[s].size

    def block(self, s):
        return slice(self.off[s], self.off[s + 1])


def _apply_left(block, rows_in, data, rows_out, pos, out, sign=1.0):
    """``out[rows_out] += sign * (block @ Z)[rows_out]`` where ``Z`` has nonzero rows ``rows_in``."""
    nc = data.shape[1]
    if rows_in.size == 0 or nc == 0:
        return
    if isinstance(block, ScaledIdentity):
        if block.c != 0:
            out[pos[rows_in], :nc] += sign * block.c * data
    elif isinstance(block, DiagonalMask):
        d = block.d[rows_in]
        sel = d != 0
        out[pos[rows_in[sel]], :nc] += sign * d[sel, None] * data[sel]
    else:
        out[:, :nc] += sign * (block.M[np.ix_(rows_out, rows_in)] @ data)


def _place_block(block, s, layout, rows_out, pos, out):
    """Add ``e_s^T (x) D`` restricted to the kept columns of block ``s``."""
    cols = layout.cols[s]
    if cols.size == 0:
        return
    base = layout.off[s]
    if isinstance(block, ScaledIdentity):
        out[pos[cols], base + np.arange(cols.size)] += block.c
    elif isinstance(block, DiagonalMask):
        d = block.d[cols]
        sel = d != 0
        out[pos[cols[sel]], base + np.flatnonzero(sel)] += d[sel]
    else:
        out[:, layout.block(s)] += block.M[np.ix_(rows_out, cols)]


def _compressed_recursion(steps, T, X, Sigma=None):
    n, p = X.shape
    G = X.T @ X / n
    layout = _ColumnLayout(steps, T, p)
    A = np.zeros((T, T))
    C = np.eye(T) if Sigma is not None else None
    pos = np.full(p, -1)
    # state[s] = (rows, data, G @ R_s restricted to stored columns)
    state = {1: (np.arange(0), np.zeros((0, 0)), np.zeros((p, 0)))}
    for t in range(2, T + 1):
        rec = steps[t - 2]
        lags = [(lag, J, D) for lag, J, D in rec.lags() if t - lag >= 1]
        row_parts = [_nonzero_index(B, p, axis=0) for _, J, D in lags for B in (J, D)]
        rows = np.unique(np.concatenate(row_parts)) if row_parts else np.arange(0)
        pos[:] = -1
        pos[rows] = np.arange(rows.size)
        ncols = layout.off[t]
        data = np.zeros((rows.size, ncols))
        for lag, J, D in lags:
            s = t - lag
            rows_s, data_s, GR_s = state[s]
            _apply_left(J, rows_s, data_s, rows, pos, data)
            _apply_left(D, np.arange(p), GR_s, rows, pos, data, sign=-1.0)
            _place_block(D, s, layout, rows, pos, data)
        GR = G[:, rows] @ data
        for s in range(1, t):
            cols = layout.cols[s]
            if cols.size:
                blk = layout.block(s)
                A[t - 1, s - 1] = GR[cols, blk].trace()
                if C is not None:
                    C[t - 1, s - 1] = np.sum(Sigma[np.ix_(cols, rows)] * data[:, blk].T) / n
        state[t] = (rows, data, GR)
        state.pop(t - 2, None)
    return A, C


def _gram_eigvals(X, drop_zero=True):
    n, p = X.shape
    s = np.linalg.svd(X, compute_uv=False)
    lam = s**2 / n
    if drop_zero:
        return lam
    out = np.zeros(p)
    out[: lam.size] = lam
    return out


def memory_exact(traj: Trajectory, X) -> MemoryMatrix:
    """Exact memory matrix by block forward substitution."""
    X = np.asarray(X, dtype=float)
    steps = _check_steps(traj)
    T = traj.T
    if _all_scaled_identity(steps):
        A, _ = _spectral_recursion(steps, T, _gram_eigvals(X))
        path = "spectral"
    else:
        A, _ = _compressed_recursion(steps, T, X)
        path = "compressed"
    return MemoryMatrix(A_hat=A, method="exact", diagnostics={"path": path})


def memory_gd_closed_form(X, eta: float, T: int) -> MemoryMatrix:
    """GD memory matrix ``A[t, t'] = sum_i eta l_i (1 - eta l_i)^{t-t'-1}``.

    ``l_i`` are the eigenvalues of ``X^T X / n``, computed once.
    """
    X = np.asarray(X, dtype=float)
    if T < 1:
        raise InvalidParameterError("T must be positive")
    lam = _gram_eigvals(X)
    gamma = 1.0 - eta * lam
    diag_vals = np.zeros(T)
    power = eta * lam
    for k in range(T - 1):
        diag_vals[k + 1] = power.sum()
        power = power * gamma
    A = scipy.linalg.toeplitz(diag_vals, np.zeros(T))
    return MemoryMatrix(A_hat=A, method="gd-closed")


def sketch_matrix(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``n x m`` matrix of i.i.d. signs scaled by ``1/sqrt(m)``."""
    return (2.0 * rng.integers(0, 2, size=(n, m)) - 1.0) / math.sqrt(m)


def memory_hutchinson(traj: Trajectory, X, m: int = DEFAULT_SKETCH_SIZE, seed: int = 0, rep: int = 0) -> MemoryMatrix:
    """Hutchinson approximation of the memory matrix.

    One sign sketch ``W`` is drawn from the ``(seed, rep)`` sketch substream
    and reused for every entry.  ``diagnostics["variance"]`` holds the
    per-entry variance estimate across the ``m`` probes (NaN when ``m = 1``).
    """
    if m < 1:
        raise InvalidParameterError("sketch size m must be at least 1")
    X = np.asarray(X, dtype=float)
    steps = _check_steps(traj)
    n, p = X.shape
    T = traj.T
    W = sketch_matrix(n, m, substream(seed, rep, STREAM_SKETCH))
    XtW = X.T @ W
    A = np.zeros((T, T))
    var = np.full((T, T), np.nan)
    # state[s] = (V_s, G V_s), both p x m(s-1)
    state = {1: (np.zeros((p, 0)), np.zeros((p, 0)))}
    for t in range(2, T + 1):
        rec = steps[t - 2]
        Vt = np.zeros((p, m * (t - 1)))
        for lag, J, D in rec.lags():
            s = t - lag
            if s < 1:
                continue
            Vs, GVs = state[s]
            k = m * (s - 1)
            if k:
                Vt[:, :k] += J.matmul(Vs) - D.matmul(GVs)
            Vt[:, k : k + m] += D.matmul(XtW)
        probes = (XtW[:, None, :] * Vt.reshape(p, t - 1, m)).sum(axis=0) / n
        A[t - 1, : t - 1] = probes.sum(axis=1)
        if m > 1:
            var[t - 1, : t - 1] = (m * probes).var(axis=1, ddof=1) / m
        state[t] = (Vt, X.T @ (X @ Vt) / n)
        state.pop(t - 2, None)
    var[np.triu_indices(T)] = 0.0
    return MemoryMatrix(A_hat=A, method="hutchinson", m=m, seed=seed, diagnostics={"variance": var, "rep": rep})


# -- weights -----------------------------------------------------------------


def weights(memory: MemoryMatrix, n: int) -> WeightMatrix:
    """``(I - A/n)^{-1}`` by forward substitution on the unit lower-triangular system."""
    A = memory.A_hat
    T = A.shape[0]
    M = np.eye(T) - A / n
    W = scipy.linalg.solve_triangular(M, np.eye(T), lower=True, unit_diagonal=True)
    W = np.tril(W)
    np.fill_diagonal(W, 1.0)
    return WeightMatrix(W_hat=W)


def check_weights(traj: Trajectory, X, Sigma) -> np.ndarray:
    """Alternative weights ``1{t=s} + trace(Sigma R_{t,s}) / n`` (needs ``Sigma``)."""
    X = np.asarray(X, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    steps = _check_steps(traj)
    T = traj.T
    n = X.shape[0]
    if _all_scaled_identity(steps):
        lam, U = np.linalg.eigh(X.T @ X / n)
        sigma_diag = np.einsum("ij,ik,kj->j", U, Sigma, U)
        _, C = _spectral_recursion(steps, T, lam, sigma_diag=sigma_diag, n=n)
    else:
        _, C = _compressed_recursion(steps, T, X, Sigma=Sigma)
    return C


def build_memory(traj: Trajectory, X, method: str = "exact", m: int = DEFAULT_SKETCH_SIZE, seed: int = 0, rep: int = 0) -> MemoryMatrix:
    """Dispatch on ``method`` in ``{"exact", "gd-closed", "hutchinson"}``."""
    if method == "exact":
        return memory_exact(traj, X)
    if method == "gd-closed":
        if traj.config.algorithm != "GD":
            raise InvalidParameterError("the closed form applies to GD trajectories only")
        return memory_gd_closed_form(X, traj.eta, traj.T)
    if method == "hutchinson":
        return memory_hutchinson(traj, X, m=m, seed=seed, rep=rep)
    raise InvalidParameterError(f"unknown memory method {method!r}; expected one of {METHODS}")


def save_memory(memory: MemoryMatrix, W: Optional[WeightMatrix], directory) -> None:
    """Write ``A_hat.csv``, ``W_hat.csv`` and a ``memory.json`` sidecar."""
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "A_hat.csv"), memory.A_hat, fmt=FLOAT_FMT, delimiter=",")
    if W is not None:
        np.savetxt(os.path.join(directory, "W_hat.csv"), W.W_hat, fmt=FLOAT_FMT, delimiter=",")
    side = {"method": memory.method, "m": memory.m, "seed": memory.seed, "T": memory.T}
    with open(os.path.join(directory, "memory.json"), "w", encoding="utf-8") as fh:
        json.dump(side, fh)
