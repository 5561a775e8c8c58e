"""Scikit-learn style wrappers around the training drivers."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .energy import RitzPoisson1D, SupervisedL2, mask, mask_dx
from .expansion import ExpansionConfig, run_expansive_training
from .hilbert import trapezoid_rule
from .network import Architecture, features_with_dx, forward_batch, init_params
from .optimizers import AdamConfig, LambdaTable, NgfConfig, StopCriteria, run_adam, run_ngf

__all__ = ["NGFRegressor", "RitzPoissonSolver"]

_OPTIMIZERS = ("ngf", "adam", "expansive")


class _FlowTrainer(BaseEstimator):
    """Shared fitting logic; subclasses supply the energy."""

    # saturation tolerances used when sat_abs/sat_rel are "auto"
    _auto_sat = {"fixed": (None, None), "expansive": (1e-7, 5e-3), "adam": (1e-8, 5e-4)}

    def _sat(self, which: str):
        auto_abs, auto_rel = self._auto_sat[which]
        sat_abs = auto_abs if self.sat_abs == "auto" else self.sat_abs
        sat_rel = auto_rel if self.sat_rel == "auto" else self.sat_rel
        return sat_abs, sat_rel

    def _check_params(self):
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}")
        if len(self.widths) < 1:
            raise ValueError("widths must name at least one block")

    def _train(self, energy, input_dim: int, batches=None):
        self._check_params()
        rng = check_random_state(self.random_state)
        seed = int(rng.randint(np.iinfo(np.int32).max))
        gen = np.random.default_rng(seed)
        params = init_params(Architecture(input_dim, tuple(self.widths)), gen)
        table = self.lambda_table
        if isinstance(table, str):
            table = LambdaTable.named(table)
        ngf_cfg = NgfConfig(gamma0=self.gamma0, lambda_table=table, max_epochs=self.max_iter)
        adam_cfg = AdamConfig(tau0=self.learning_rate, decay_rate=self.decay_rate,
                              max_iters=self.max_iter)
        if self.optimizer == "expansive":
            sa, sr = self._sat("expansive")
            aa, ar = self._adam_sat()
            exp_cfg = ExpansionConfig(max_expansions=self.max_expansions,
                                      init_method=self.init_method,
                                      max_total_iters=self.max_total_iters,
                                      term_abs=self.term_abs, term_rel=self.term_rel)
            res = run_expansive_training(
                energy, params, ngf_cfg, adam_cfg, exp_cfg,
                StopCriteria(tol_abs=self.tol, sat_abs=sa, sat_rel=sr),
                StopCriteria(tol_abs=self.tol, sat_abs=aa, sat_rel=ar), batches, gen)
            params, record, flag = res.params, res.record, res.record.flag
            self.n_expansions_ = res.summary["expansions"]
            self.summary_ = res.summary
        else:
            sa, sr = self._sat("fixed")
            run = run_ngf if self.optimizer == "ngf" else run_adam
            conf = ngf_cfg if self.optimizer == "ngf" else adam_cfg
            params, record, flag = run(energy, params, batches, conf,
                                       StopCriteria(tol_abs=self.tol, sat_abs=sa, sat_rel=sr),
                                       phase=self.optimizer)
            self.n_expansions_ = 0
        self.params_ = params
        self.record_ = record
        self.n_iter_ = len(record)
        self.stop_flag_ = flag.value
        self.loss_ = record.rows[-1]["loss"]
        return self

    def _adam_sat(self):
        return self._auto_sat["adam"]


class NGFRegressor(RegressorMixin, _FlowTrainer):
    """Residual tanh network fit to ``(X, y)`` by natural gradient flow.

    Parameters
    ----------
    widths : tuple of int
        Hidden width of each residual block.
    optimizer : {"ngf", "adam", "expansive"}
        ``"expansive"`` grows the network by one block whenever training
        saturates.
    max_iter : int
        Epoch cap for a fixed-depth run (and per phase when expanding).
    tol : float or None
        Stop once the loss is at most ``tol``.
    sat_abs, sat_rel : float, None or "auto"
        Saturation tolerances; "auto" turns them off for fixed-depth runs.
    n_batches : int
        Number of contiguous mini-batches per epoch.
    random_state : int, RandomState or None
    """

    def __init__(self, widths=(15, 15), optimizer="ngf", max_iter=1000, tol=1e-5,
                 sat_abs="auto", sat_rel="auto", lambda_table="default", gamma0=10.0,
                 learning_rate=5e-3, decay_rate=1e-8, n_batches=1, max_expansions=6,
                 init_method="gradient_aligned", max_total_iters=3000, term_abs=None,
                 term_rel=None, random_state=None):
        self.widths = widths
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.tol = tol
        self.sat_abs = sat_abs
        self.sat_rel = sat_rel
        self.lambda_table = lambda_table
        self.gamma0 = gamma0
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.n_batches = n_batches
        self.max_expansions = max_expansions
        self.init_method = init_method
        self.max_total_iters = max_total_iters
        self.term_abs = term_abs
        self.term_rel = term_rel
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True, dtype=np.float64)
        if sample_weight is not None:
            sample_weight = np.asarray(sample_weight, dtype=np.float64)
            if sample_weight.shape != y.shape or np.any(sample_weight < 0):
                raise ValueError("sample_weight must be nonnegative with one entry per sample")
        batches = None
        if self.n_batches > 1:
            batches = np.array_split(np.arange(X.shape[0]), self.n_batches)
        energy = SupervisedL2(X, y, sample_weight, batches)
        self.n_features_in_ = X.shape[1]
        return self._train(energy, X.shape[1], energy.default_batches())

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward_batch(self.params_, X)


class RitzPoissonSolver(_FlowTrainer):
    """Solve ``-u'' = f`` on ``[0, 1]`` with ``u(0) = u(1) = 0`` by energy minimization.

    The trial function is ``4x(1-x) N(x)`` with ``N`` a residual network.
    ``fit`` takes no data; the forcing is a parameter.

    Parameters
    ----------
    forcing : callable
        Vectorized right-hand side ``f(x)``.
    n_nodes : int
        Trapezoid nodes used for the energy integrals.
    """

    _auto_sat = {"fixed": (1e-8, 5e-5), "expansive": (1e-8, 5e-5), "adam": (1e-9, 5e-6)}

    def __init__(self, forcing: Optional[Callable] = None, widths=(15, 15, 15), n_nodes=401,
                 optimizer="ngf", max_iter=1000, tol=None, sat_abs="auto", sat_rel="auto",
                 lambda_table="default", gamma0=10.0, learning_rate=5e-3, decay_rate=1e-8,
                 max_expansions=6, init_method="gradient_aligned", max_total_iters=3000,
                 term_abs=5e-3, term_rel=1e-6, random_state=None):
        self.forcing = forcing
        self.widths = widths
        self.n_nodes = n_nodes
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.tol = tol
        self.sat_abs = sat_abs
        self.sat_rel = sat_rel
        self.lambda_table = lambda_table
        self.gamma0 = gamma0
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.max_expansions = max_expansions
        self.init_method = init_method
        self.max_total_iters = max_total_iters
        self.term_abs = term_abs
        self.term_rel = term_rel
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if not callable(self.forcing):
            raise ValueError("forcing must be a callable f(x)")
        energy = RitzPoisson1D(self.forcing, trapezoid_rule(self.n_nodes))
        self.n_features_in_ = 1
        self._train(energy, 1)
        self.energy_ = self.loss_
        return self

    def _eval(self, X):
        check_is_fitted(self, "params_")
        x = check_array(np.asarray(X, dtype=np.float64).reshape(-1, 1), dtype=np.float64)
        z, zd = features_with_dx(self.params_, x)
        N, Nx = z @ self.params_.closing, zd @ self.params_.closing
        t = x[:, 0]
        return mask(t) * N, mask_dx(t) * N + mask(t) * Nx

    def predict(self, X):
        """Solution values at ``X`` (any shape with one coordinate per point)."""
        return self._eval(X)[0]

    def predict_derivative(self, X):
        return self._eval(X)[1]
