import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itrisk.errors import InvalidParameterError
from itrisk.inference import (
    RiskReport,
    averaged_risk_estimate,
    confidence_interval,
    cross_risk_estimate,
    cross_risk_matrix,
    debias,
    debias_vector,
    early_stop,
    inference_report,
    normal_quantile,
    risk_estimate,
    risk_path,
    risk_report,
    zscore,
)
from itrisk.memory import memory_exact, weights
from itrisk.model import LinearModelInstance, SimulationConfig, generate_instance, sigma_inv_column, true_risk_path
from itrisk.solvers import SolverConfig, run_trajectory

ALGOS = [
    SolverConfig("GD", T=15),
    SolverConfig("AGD", T=15),
    SolverConfig("ISTA", T=15, lam=0.1),
    SolverConfig("FISTA", T=15, lam=0.1),
    SolverConfig("LQA_MCP", T=15, lam=0.1, tau=3.0),
]


def fitted(cfg, n=40, p=50, seed=0, rho=0.5):
    inst = generate_instance(SimulationConfig(n=n, p=p, rho=rho, seed=seed))
    traj = run_trajectory(inst, cfg)
    W = weights(memory_exact(traj, inst.X), inst.n).W_hat
    return inst, traj, W


# -- risk ---------------------------------------------------------------------------------


@pytest.mark.parametrize("cfg", ALGOS, ids=lambda c: c.algorithm)
def test_first_iterate_risk_is_mean_square_response(cfg):
    inst, traj, W = fitted(cfg)
    assert risk_estimate(traj.F, W, 1) == pytest.approx(inst.y @ inst.y / inst.n, rel=1e-12)


def test_zero_response_gives_zero_risk():
    X = np.random.default_rng(0).standard_normal((20, 10))
    inst = LinearModelInstance(X, np.zeros(20))
    traj = run_trajectory(inst, SolverConfig("FISTA", T=6, lam=0.1))
    W = weights(memory_exact(traj, X), 20)
    assert not np.any(traj.B)
    assert np.all(risk_path(traj.F, W) == 0)


def test_risk_path_matches_pointwise():
    _, traj, W = fitted(ALGOS[3])
    r = risk_path(traj.F, W)
    np.testing.assert_allclose(r, [risk_estimate(traj.F, W, t) for t in range(1, 16)], rtol=1e-12)


def test_index_checks():
    _, traj, W = fitted(ALGOS[0])
    for fn in (lambda: risk_estimate(traj.F, W, 0), lambda: risk_estimate(traj.F, W, 16), lambda: cross_risk_estimate(traj.F, W, 1, 16)):
        with pytest.raises(IndexError):
            fn()
    with pytest.raises(ValueError):
        risk_path(traj.F, W[:3, :3])


def test_gd_risk_tracks_truth():
    errs = []
    for seed in range(3):
        inst, traj, W = fitted(SolverConfig("GD", T=30), n=1200, p=1500, seed=seed)
        r = risk_path(traj.F, W)
        rt = true_risk_path(traj.B, inst.truth)
        errs.append(np.abs(r - rt) / rt)
    assert np.all(np.mean(errs, axis=0) <= 0.10)


# -- cross risk ----------------------------------------------------------------------------


@pytest.mark.parametrize("cfg", ALGOS, ids=lambda c: c.algorithm)
def test_cross_risk_properties(cfg):
    _, traj, W = fitted(cfg, seed=3)
    C = cross_risk_matrix(traj.F, W)
    r = risk_path(traj.F, W)
    assert np.array_equal(C, C.T)
    np.testing.assert_allclose(np.diag(C), r, rtol=1e-12)
    assert np.linalg.eigvalsh(C).min() >= -1e-10 * np.abs(C).max()
    assert np.all(np.abs(C) <= np.sqrt(np.outer(r, r)) * (1 + 1e-12))
    for t, s in [(1, 1), (4, 9), (15, 2)]:
        assert cross_risk_estimate(traj.F, W, t, s) == pytest.approx(C[t - 1, s - 1], rel=1e-12)
        assert cross_risk_estimate(traj.F, W, t, s) == cross_risk_estimate(traj.F, W, s, t)
    assert cross_risk_estimate(traj.F, W, 6, 6) == pytest.approx(risk_estimate(traj.F, W, 6), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 12), n=st.integers(1, 30))
def test_cross_risk_gram_random(seed, T, n):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, T))
    W = np.tril(rng.standard_normal((T, T)), -1) + np.eye(T)
    C = cross_risk_matrix(F, W)
    r = risk_path(F, W)
    assert np.linalg.eigvalsh(C).min() >= -1e-10 * max(1.0, np.abs(C).max())
    assert np.all(np.abs(C) <= np.sqrt(np.outer(r, r)) * (1 + 1e-10) + 1e-12)


# -- averaged iterates -------------------------------------------------------------------------


def test_averaged_examples():
    _, traj, W = fitted(ALGOS[2], seed=4)
    C = cross_risk_matrix(traj.F, W)
    assert averaged_risk_estimate(traj.F, W, 5, 1) == pytest.approx(C[4, 4], rel=1e-12)
    two = (C[5, 5] + 2 * C[5, 6] + C[6, 6]) / 4
    assert averaged_risk_estimate(traj.F, W, 6, 2) == pytest.approx(two, rel=1e-12)
    for t0, m in [(1, 15), (3, 7), (10, 6)]:
        block = C[t0 - 1 : t0 - 1 + m, t0 - 1 : t0 - 1 + m]
        assert averaged_risk_estimate(traj.F, W, t0, m) == pytest.approx(block.sum() / m**2, rel=1e-10)
        assert averaged_risk_estimate(traj.F, W, t0, m) >= 0
    with pytest.raises(IndexError):
        averaged_risk_estimate(traj.F, W, 10, 7)
    with pytest.raises(IndexError):
        averaged_risk_estimate(traj.F, W, 1, 0)


# -- early stopping -----------------------------------------------------------------------------


def test_early_stop_examples():
    assert early_stop([3, 1, 2]) == 2
    assert early_stop([2, 1, 1]) == 2
    assert early_stop([4.0] * 6) == 1
    with pytest.raises(ValueError):
        early_stop([])


@given(r=st.lists(st.floats(0, 1e6), min_size=1, max_size=40), c=st.sampled_from([1e-3, 0.5, 2.0, 7.0, 1e3]))
def test_early_stop_scale_invariant(r, c):
    r = np.array(r)
    assert early_stop(r) == early_stop(c * r)
    assert r[early_stop(r) - 1] == r.min()


# -- debiasing ----------------------------------------------------------------------------------


def test_debias_matches_direct_formula():
    inst, traj, W = fitted(ALGOS[2], n=50, p=60, seed=5)
    X, n = inst.X, inst.n
    Sigma = inst.truth.Sigma
    for t in (1, 4, 15):
        r = traj.F[:, :t] @ W[t - 1, :t]
        for j in (1, 7, 60):
            col = np.linalg.solve(Sigma, np.eye(60)[:, j - 1])
            direct = traj.B[j - 1, t - 1] + r @ X @ col / n
            assert debias(traj, W, col, t, j) == pytest.approx(direct, rel=1e-10, abs=1e-12)


def test_debias_identity_sigma_and_first_iterate():
    inst, traj, W = fitted(ALGOS[3], n=30, p=20, seed=6)
    X, y, n = inst.X, inst.y, inst.n
    e = np.eye(20)
    t = 7
    r = traj.F[:, :t] @ W[t - 1, :t]
    assert debias(traj, W, e[:, 2], t, 3) == pytest.approx(traj.B[2, t - 1] + (X.T @ r)[2] / n, rel=1e-12)
    col = sigma_inv_column(inst.truth.Sigma, 4)
    assert debias(traj, W, col, 1, 4) == pytest.approx((X.T @ y) @ col / n, rel=1e-12)


def test_debias_vector_agrees():
    inst, traj, W = fitted(ALGOS[1], seed=7)
    cols = np.linalg.inv(inst.truth.Sigma)[:, [0, 4, 9]]
    vec = debias_vector(traj, W, cols, 8)
    scalar = [debias(traj, W, cols[:, k], 8, j) for k, j in enumerate((1, 5, 10))]
    np.testing.assert_allclose(vec + traj.B[[0, 4, 9], 7], scalar, rtol=1e-12)


def test_debias_zero_residuals():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((80, 5))
    b_star = rng.standard_normal(5)
    traj = run_trajectory(X, SolverConfig("GD", T=4000), y=X @ b_star)
    W = weights(memory_exact(traj, X), 80).W_hat
    col = np.eye(5)[:, 0]
    # residuals (and the correction) vanish once GD has converged
    assert abs(debias(traj, W, col, 4000, 1) - traj.B[0, -1]) <= 1e-10


def test_debias_dimension_checks():
    _, traj, W = fitted(ALGOS[0])
    with pytest.raises(ValueError):
        debias(traj, W, np.ones(3), 2, 1)
    with pytest.raises(IndexError):
        debias(traj, W, np.ones(50), 2, 51)


# -- z-scores and intervals --------------------------------------------------------------------


def test_zscore_examples():
    assert zscore(0.3, 0.3, 2.0, 50, 1.5) == 0.0
    assert zscore(1.2, 1.0, 4.0, 100, 1.0) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(InvalidParameterError):
        zscore(1.0, 0.0, 0.0, 10, 1.0)
    with pytest.raises(InvalidParameterError):
        zscore(1.0, 0.0, 1.0, 10, -1.0)


def _quantile_oracle(q):
    mpmath.mp.dps = 40
    return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(q) - 1))


@pytest.mark.parametrize("q", [0.5, 0.6, 0.9, 0.975, 0.995, 1 - 1e-6, 1e-4, 0.025])
def test_normal_quantile_high_precision(q):
    assert abs(normal_quantile(q) - _quantile_oracle(q)) <= 1e-8


def test_ci_examples():
    lo, hi = confidence_interval(0.0, 1.0, 1, 1.0, 0.05)
    assert abs(hi - 1.959964) <= 1e-5 and lo == -hi
    assert confidence_interval(0.7, 0.0, 30, 1.0) == (0.7, 0.7)
    w1 = np.subtract(*confidence_interval(0.0, 2.0, 100, 1.3)[::-1])
    w4 = np.subtract(*confidence_interval(0.0, 2.0, 400, 1.3)[::-1])
    assert w4 == pytest.approx(w1 / 2, rel=1e-14)
    for alpha in (0.0, 1.0, -0.1):
        with pytest.raises(InvalidParameterError):
            confidence_interval(0.0, 1.0, 10, 1.0, alpha)


def test_inference_report_invariants():
    inst, traj, W = fitted(ALGOS[2], n=60, p=75, seed=9)
    r = risk_path(traj.F, W)
    rep = inference_report(traj, W, inst.truth.Sigma, [5, 10], [1, 2, 40], alpha=0.1, b_star=inst.truth.b_star)
    assert len(rep.entries) == 6 and rep.alpha == 0.1
    Sinv = np.linalg.inv(inst.truth.Sigma)
    for e in rep.entries:
        assert e.ci_lo <= e.b_debias <= e.ci_hi
        expected = 2 * normal_quantile(0.95) * math.sqrt(r[e.t - 1] * Sinv[e.j - 1, e.j - 1] / inst.n)
        assert e.width == pytest.approx(expected, rel=1e-10)
        assert e.covered == (e.ci_lo <= inst.truth.b_star[e.j - 1] <= e.ci_hi)
        assert e.z == pytest.approx(zscore(e.b_debias, inst.truth.b_star[e.j - 1], r[e.t - 1], inst.n, Sinv[e.j - 1, e.j - 1]), rel=1e-9)
    blind = inference_report(traj, W, np.eye(75), [5], [1])
    assert blind.entries[0].z is None and blind.entries[0].covered is None


def test_risk_report():
    inst, traj, W = fitted(ALGOS[4], seed=10)
    rep = risk_report(traj, W, inst.truth, cross=True, r_infinity=3.0)
    assert rep.t_star == early_stop(rep.r_hat)
    assert np.array_equal(np.diag(rep.r_hat_cross), rep.r_hat)
    np.testing.assert_allclose(rep.r_true, true_risk_path(traj.B, inst.truth))
    assert rep.r_infinity == 3.0
    assert risk_report(traj, W).r_true is None
    with pytest.raises(ValueError):
        RiskReport(r_hat=np.array([1.0, -1.0]), t_star=1)
