"""scikit-learn style wrapper: run a solver, estimate its risk path, pick an iterate."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .errors import InvalidParameterError
from .inference import early_stop, inference_report, risk_path
from .memory import DEFAULT_SKETCH_SIZE, METHODS, build_memory, weights
from .model import LinearModelInstance
from .solvers import SolverConfig, run_trajectory


class IterateRiskRegressor(RegressorMixin, BaseEstimator):
    """Linear regression by a first-order solver with data-driven iterate selection.

    The solver is run for ``n_iter`` iterations from zero; the out-of-sample
    risk of every iterate is estimated from the training data alone and the
    returned coefficients are those of the estimated-risk minimizer
    (``select="early_stop"``) or of the last iterate (``select="last"``).

    Parameters
    ----------
    algorithm : {"GD", "AGD", "ISTA", "FISTA", "LQA_MCP"}
    lam : float
        Penalty level for the proximal methods.
    tau : float, optional
        MCP concavity; required for ``LQA_MCP``.
    eta : float, optional
        Step size; defaults to ``1 / L`` with ``L`` the Lipschitz bound.
    n_iter : int
        Number of iterates ``T``.
    memory : {"exact", "gd-closed", "hutchinson"}
    n_sketch : int
        Sketch width ``m`` for ``memory="hutchinson"``.
    random_state : int
        Seed of the sketch substream.
    select : {"early_stop", "last"}

    Attributes
    ----------
    coef_path_ : ndarray of shape (n_features, n_iter)
    risk_hat_ : ndarray of shape (n_iter,)
    t_star_ : int
        1-based index of the selected iterate.
    coef_ : ndarray of shape (n_features,)
    memory_, weights_ : fitted memory and weight matrices
    trajectory_ : the full solver trajectory
    """

    def __init__(
        self,
        algorithm="GD",
        lam=0.0,
        tau=None,
        eta=None,
        n_iter=100,
        memory="exact",
        n_sketch=DEFAULT_SKETCH_SIZE,
        random_state=0,
        select="early_stop",
    ):
        self.algorithm = algorithm
        self.lam = lam
        self.tau = tau
        self.eta = eta
        self.n_iter = n_iter
        self.memory = memory
        self.n_sketch = n_sketch
        self.random_state = random_state
        self.select = select

    def _solver_config(self):
        return SolverConfig(self.algorithm, T=self.n_iter, eta=self.eta, lam=self.lam, tau=self.tau)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True)
        if self.memory not in METHODS:
            raise InvalidParameterError(f"memory must be one of {METHODS}, got {self.memory!r}")
        if self.select not in ("early_stop", "last"):
            raise InvalidParameterError(f"select must be 'early_stop' or 'last', got {self.select!r}")
        traj = run_trajectory(LinearModelInstance(X, y), self._solver_config())
        mem = build_memory(traj, X, method=self.memory, m=self.n_sketch, seed=0 if self.random_state is None else int(self.random_state))
        W = weights(mem, X.shape[0])
        r_hat = risk_path(traj.F, W)

        self.trajectory_ = traj
        self.memory_ = mem
        self.weights_ = W
        self.coef_path_ = traj.B
        self.risk_hat_ = r_hat
        self.t_star_ = early_stop(r_hat) if self.select == "early_stop" else traj.T
        self.coef_ = traj.B[:, self.t_star_ - 1].copy()
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return X @ self.coef_

    def debias(self, Sigma=None, t=None, coordinates=None, alpha=0.05, b_star=None):
        """Debiased coordinates with ``1 - alpha`` intervals at iterate ``t``.

        ``Sigma`` defaults to the identity; ``t`` to the selected iterate and
        ``coordinates`` (1-based) to all features.
        """
        check_is_fitted(self, "coef_")
        p = self.n_features_in_
        Sigma = np.eye(p) if Sigma is None else np.asarray(Sigma, dtype=float)
        t = self.t_star_ if t is None else int(t)
        coords = range(1, p + 1) if coordinates is None else coordinates
        return inference_report(
            self.trajectory_, self.weights_, Sigma, [t], list(coords), alpha=alpha, b_star=b_star, r_hat=self.risk_hat_
        )
