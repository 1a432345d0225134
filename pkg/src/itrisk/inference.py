"""Risk estimates, early stopping and debiased inference from a trajectory.

Everything here is a function of the residual matrix ``F`` (columns
``y - X b^t``), the gradient matrix ``V`` and the weight matrix ``W_hat``.
The weighted residual of iterate ``t`` is ``sum_{s<=t} W_hat[t, s] F e_s``,
i.e. column ``t`` of ``F @ W_hat.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import InvalidParameterError
from .model import Truth, covariance_factor, sigma_inv_column, true_risk_path


def _weights_array(W_hat):
    return np.asarray(getattr(W_hat, "W_hat", W_hat), dtype=float)


def _check_t(t, T, name="t"):
    if not 1 <= int(t) <= T:
        raise IndexError(f"{name}={t} outside [1, {T}]")
    return int(t)


def weighted_residuals(F, W_hat) -> np.ndarray:
    """``n x T`` matrix whose column ``t`` is ``sum_s W_hat[t, s] F e_s``."""
    F = np.asarray(F, dtype=float)
    W = _weights_array(W_hat)
    if W.shape != (F.shape[1], F.shape[1]):
        raise ValueError(f"weights of shape {W.shape} do not match {F.shape[1]} iterates")
    return F @ W.T


def risk_estimate(F, W_hat, t: int) -> float:
    """``||sum_{s<=t} w_{t,s} F e_s||^2 / n`` for 1-based ``t``."""
    F = np.asarray(F, dtype=float)
    W = _weights_array(W_hat)
    t = _check_t(t, F.shape[1])
    r = F[:, :t] @ W[t - 1, :t]
    return float(r @ r) / F.shape[0]


def risk_path(F, W_hat) -> np.ndarray:
    """Risk estimates for every iterate, length ``T``."""
    R = weighted_residuals(F, W_hat)
    return np.einsum("it,it->t", R, R) / R.shape[0]


def cross_risk_estimate(F, W_hat, t: int, t2: int) -> float:
    F = np.asarray(F, dtype=float)
    W = _weights_array(W_hat)
    T = F.shape[1]
    t, t2 = _check_t(t, T), _check_t(t2, T, "t'")
    r1 = F[:, :t] @ W[t - 1, :t]
    r2 = F[:, :t2] @ W[t2 - 1, :t2]
    return float(r1 @ r2) / F.shape[0]


def cross_risk_matrix(F, W_hat) -> np.ndarray:
    """Gram matrix of the weighted residuals divided by ``n`` (symmetric by construction)."""
    R = weighted_residuals(F, W_hat)
    C = R.T @ R / R.shape[0]
    return 0.5 * (C + C.T)


def averaged_risk_estimate(F, W_hat, t0: int, m: int) -> float:
    """Estimated risk of the average of iterates ``t0, ..., t0 + m - 1``.

    Equal to ``(1/m^2) sum_{t,t'} r_hat[t, t']`` over the window, evaluated as
    the squared norm of the averaged weighted residual.
    """
    F = np.asarray(F, dtype=float)
    W = _weights_array(W_hat)
    T = F.shape[1]
    if m < 1 or t0 < 1 or t0 + m - 1 > T:
        raise IndexError(f"window [{t0}, {t0 + m - 1}] outside [1, {T}]")
    stop = t0 + m - 1
    r = F[:, :stop] @ W[t0 - 1 : stop, :stop].mean(axis=0)
    return float(r @ r) / F.shape[0]


def early_stop(r_hat) -> int:
    """1-based index of the smallest estimated risk; ties go to the earliest."""
    r_hat = np.asarray(r_hat, dtype=float)
    if r_hat.size == 0:
        raise ValueError("risk path is empty")
    # np.argmin returns the first occurrence of the minimum
    return int(np.argmin(r_hat)) + 1


# -- inference ------------------------------------------------------------------


def normal_quantile(q: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < q < 1.0:
        raise InvalidParameterError(f"quantile level must lie in (0, 1), got {q}")
    return float(ndtri(q))


def debias(traj, W_hat, sigma_inv_col, t: int, j: int) -> float:
    """Debiased estimate of coordinate ``j`` (1-based) from iterate ``t``.

    ``b^t_j + (1/n) r_t^T X Sigma^{-1} e_j`` with ``r_t`` the weighted
    residual.  Since ``X^T F e_s / n = v^s`` the correction is computed from the
    stored gradients as ``(sum_s w_{t,s} v^s)^T Sigma^{-1} e_j``.
    """
    W = _weights_array(W_hat)
    t = _check_t(t, traj.T)
    col = np.asarray(sigma_inv_col, dtype=float)
    if col.shape != (traj.p,):
        raise ValueError(f"Sigma^-1 column must have length {traj.p}, got {col.shape}")
    if not 1 <= j <= traj.p:
        raise IndexError(f"coordinate {j} outside [1, {traj.p}]")
    g = traj.V[:, :t] @ W[t - 1, :t]
    return float(traj.B[j - 1, t - 1] + g @ col)


def debias_vector(traj, W_hat, sigma_inv_cols, t: int) -> np.ndarray:
    """Debiased estimates for several coordinates; ``sigma_inv_cols`` is ``p x k``."""
    W = _weights_array(W_hat)
    t = _check_t(t, traj.T)
    g = traj.V[:, :t] @ W[t - 1, :t]
    return g @ np.asarray(sigma_inv_cols, dtype=float)


def zscore(b_debias_j, b_star_j, r_hat_t, n, sigma_inv_jj) -> float:
    """``sqrt(n) (b_debias_j - b*_j) / sqrt(sigma_inv_jj * r_hat_t)``."""
    if not r_hat_t > 0 or not sigma_inv_jj > 0:
        raise InvalidParameterError("z-score needs positive r_hat_t and (Sigma^-1)_jj")
    return math.sqrt(n) * (b_debias_j - b_star_j) / math.sqrt(sigma_inv_jj * r_hat_t)


def confidence_interval(b_debias_j, r_hat_t, n, sigma_inv_jj, alpha: float = 0.05):
    """Two-sided ``1 - alpha`` interval ``b -/+ z_{alpha/2} sqrt(r_hat_t sigma_inv_jj / n)``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if r_hat_t < 0 or sigma_inv_jj < 0:
        raise InvalidParameterError("variance inputs must be nonnegative")
    half = normal_quantile(1.0 - alpha / 2.0) * math.sqrt(r_hat_t * sigma_inv_jj / n)
    return b_debias_j - half, b_debias_j + half


# -- reports ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RiskReport:
    r_hat: np.ndarray
    t_star: int
    r_true: Optional[np.ndarray] = None
    r_hat_cross: Optional[np.ndarray] = None
    r_infinity: Optional[float] = None

    def __post_init__(self):
        if np.any(self.r_hat < 0):
            raise ValueError("risk estimates must be nonnegative")


def risk_report(traj, W_hat, truth: Optional[Truth] = None, cross: bool = False, r_infinity=None) -> RiskReport:
    r_hat = risk_path(traj.F, W_hat)
    C = None
    if cross:
        C = cross_risk_matrix(traj.F, W_hat)
        # diagonal taken from the per-iterate path so the two agree exactly
        C[np.diag_indices_from(C)] = r_hat
    r_true = true_risk_path(traj.B, truth) if truth is not None else None
    return RiskReport(r_hat=r_hat, t_star=early_stop(r_hat), r_true=r_true, r_hat_cross=C, r_infinity=r_infinity)


@dataclass(frozen=True)
class InferenceEntry:
    t: int
    j: int
    b_debias: float
    z: Optional[float]
    ci_lo: float
    ci_hi: float
    covered: Optional[bool] = None

    @property
    def width(self) -> float:
        return self.ci_hi - self.ci_lo


@dataclass(frozen=True)
class InferenceReport:
    entries: List[InferenceEntry] = field(default_factory=list)
    alpha: float = 0.05


def inference_report(
    traj,
    W_hat,
    Sigma,
    times: Sequence[int],
    coordinates: Sequence[int] = (1,),
    alpha: float = 0.05,
    b_star=None,
    r_hat=None,
    factor=None,
) -> InferenceReport:
    """Debiased estimates, intervals and (given ``b_star``) z-scores and coverage.

    ``Sigma`` is only used through solves ``Sigma x = e_j``; pass the Cholesky
    ``factor`` to reuse one across calls.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    S = covariance_factor(Sigma) if factor is None else factor
    if r_hat is None:
        r_hat = risk_path(traj.F, W_hat)
    n = traj.n
    cols = {j: sigma_inv_column(Sigma, j, factor=S) for j in coordinates}
    entries = []
    for t in times:
        t = _check_t(t, traj.T)
        rt = float(r_hat[t - 1])
        for j in coordinates:
            col = cols[j]
            bd = debias(traj, W_hat, col, t, j)
            lo, hi = confidence_interval(bd, rt, n, col[j - 1], alpha)
            z = covered = None
            if b_star is not None:
                bj = float(b_star[j - 1])
                z = zscore(bd, bj, rt, n, col[j - 1]) if rt > 0 else None
                covered = bool(lo <= bj <= hi)
            entries.append(InferenceEntry(t=t, j=j, b_debias=bd, z=z, ci_lo=lo, ci_hi=hi, covered=covered))
    return InferenceReport(entries=entries, alpha=alpha)
