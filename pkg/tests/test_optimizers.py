import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ngflow.energy import Energy, EnergyEval, SupervisedL2
from ngflow.hilbert import Space, monte_carlo_rule
from ngflow.network import Architecture, BlockParams, NetworkParams, forward_batch
from ngflow.optimizers import (
    AdamConfig,
    ArmijoFailure,
    LambdaTable,
    NgfConfig,
    NumericalError,
    StopCriteria,
    StopFlag,
    TrainRecord,
    _solve_with_retry,
    adam_lr_schedule,
    armijo_search,
    check_stopping,
    lambda_rule,
    ngf_step,
    run_adam,
    run_ngf,
    tangent_diagnostics,
)
from ngflow.problems import make_sl_problem
from conftest import random_params
from oracles import gs_projection_norm


class ClosingQuadratic(Energy):
    """E = a * zeta_0^2 on a one-parameter network (only zeta_0 matters)."""

    space = Space.L2_DISCRETE

    def __init__(self, a=1.0, flip_gradient=False, constant=None):
        self.rule = monte_carlo_rule(np.zeros((1, 1)))
        self.a = a
        self.flip = flip_gradient
        self.constant = constant

    def evaluate(self, params, batch=None, *, grad=True, gram=False):
        t = params.closing[0]
        idx = params.active_indices
        val = self.a * t * t if self.constant is None else self.constant
        out = EnergyEval(float(val))
        if grad:
            g = np.zeros(params.n_params)
            if self.constant is None:
                g[-1] = 2 * self.a * t * (-1 if self.flip else 1)
            out.grad = g[idx]
        if gram:
            G = np.zeros((params.n_params, params.n_params))
            G[-1, -1] = 1.0
            out.gram = G[np.ix_(idx, idx)]
        return out

    def represent(self, params, values, dvalues=None):
        return values

    def gradient_representation(self, params):
        return np.zeros(1)

    def pairing(self, params, h_values, h_dx_values=None):
        return 0.0


def one_param(theta=1.0):
    p = NetworkParams(Architecture(1, (1,)), [BlockParams(np.zeros((1, 1)), np.zeros(1))],
                      np.array([theta]))
    return p.with_active([2])


# -- lambda rule ----------------------------------------------------------

def test_lambda_examples():
    t = LambdaTable.default()
    assert lambda_rule(0.5, t) == 5e-5
    assert lambda_rule(10.0, t) == 5e-3
    assert lambda_rule(1e6, t) == 50.0


def test_lambda_boundaries_bit_exact():
    t = LambdaTable.default()
    inputs = [10.0**e for e in range(-1, 7)]
    expected = [5e-5, 5e-4, 5e-3, 5e-2, 5e-1, 5.0, 50.0, 50.0]
    assert [lambda_rule(x, t) for x in inputs] == [5.0 * 10.0 ** (j - 6) for j in (1, 2, 3, 4, 5, 6, 7, 7)]
    assert [lambda_rule(x, t) for x in inputs] == expected


def test_lambda_mor_table():
    t = LambdaTable.mor()
    assert lambda_rule(0.0, t) == 1e-7
    assert lambda_rule(9e4, t) == 1e-2
    assert lambda_rule(1e5, t) == 1e-1
    assert lambda_rule(1e6, t) == 1e-1


@given(j=st.integers(0, 6), frac=st.floats(0, 1, exclude_max=True))
def test_lambda_piecewise_property(j, frac):
    t = LambdaTable.default()
    lo = 0.0 if j == 0 else t.thresholds[j - 1]
    hi = t.thresholds[j] if j < 6 else 1e9
    x = lo + frac * (hi - lo)
    if x >= hi:
        return
    assert lambda_rule(x, t) == t.values[j]


def test_lambda_table_validation():
    with pytest.raises(ValueError):
        LambdaTable((1.0, 0.5), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        LambdaTable((1.0,), (1.0,))
    with pytest.raises(ValueError):
        lambda_rule(-1.0, LambdaTable.default())


# -- Armijo -----------------------------------------------------------------

def test_armijo_zero_direction():
    e = ClosingQuadratic()
    gamma, loss, new = armijo_search(e, one_param(), np.zeros(1), 10.0, 2e-4, 40)
    assert gamma == 10.0 and loss == 1.0
    assert np.array_equal(new.flatten(), one_param().flatten())


def test_armijo_halving_sequence():
    # E(1 - gamma) <= 1 - 2e-4 gamma first holds at gamma = 1.25
    gamma, loss, _ = armijo_search(ClosingQuadratic(), one_param(), np.ones(1), 10.0, 2e-4, 40)
    assert gamma == 1.25
    assert loss == 0.0625


def test_armijo_failure():
    with pytest.raises(ArmijoFailure):
        armijo_search(ClosingQuadratic(), one_param(), -np.ones(1), 10.0, 2e-4, 5)


def test_armijo_descends_on_supervised(rng):
    energy, _ = make_sl_problem(5, n_train=40, seed=3)
    p = random_params(rng, 1, (4, 4))
    g = energy.grad_theta(p)
    gamma, loss, _ = armijo_search(energy, p, g, 10.0, 2e-4, 40)
    assert loss < energy.value(p)


# -- NGF step -----------------------------------------------------------------

def test_ngf_step_zero_gradient(rng):
    p = random_params(rng)
    X = rng.uniform(0, 1, (10, 1))
    e = SupervisedL2(X, forward_batch(p, X))
    res = ngf_step(e, p)
    assert np.array_equal(res.params.flatten(), p.flatten())


def test_ngf_step_linear_least_squares(rng):
    # one trainable closing weight: N = zeta * z(x); optimum zeta* in closed form
    p = NetworkParams(Architecture(1, (1,)), [BlockParams(np.array([[0.7]]), np.array([0.1]))],
                      np.array([0.3]))
    p = p.with_active([2])
    X = rng.uniform(0, 1, (30, 1))
    y = rng.normal(size=30)
    e = SupervisedL2(X, y)
    z = X[:, 0] + np.tanh(0.7 * X[:, 0] + 0.1)
    w = np.full(30, 1 / 30)
    zstar = np.sum(w * z * y) / np.sum(w * z * z)
    tiny = LambdaTable((1.0,), (1e-300, 1e-300))
    # the risk carries no 1/2, so the exact Gauss-Newton step is gamma = 1/2
    res = ngf_step(e, p, config=NgfConfig(gamma0=0.5, lambda_table=tiny, max_halvings=0))
    assert res.params.closing[0] == pytest.approx(zstar, rel=1e-12)
    res = ngf_step(e, p, config=NgfConfig())
    G = np.sum(w * z * z)
    shrink = abs(1 - 2 * res.gamma * G / (G + res.lam))
    assert abs(res.params.closing[0] - zstar) <= shrink * abs(0.3 - zstar) + 1e-14


def test_ngf_steps_descend_every_iteration(rng):
    energy, _ = make_sl_problem(5, n_train=60, seed=1)
    p = random_params(rng, 1, (6, 6))
    for _ in range(50):
        res = ngf_step(energy, p)
        step = res.params.flatten() - p.flatten()
        assert res.loss_after <= res.loss_before - 2e-4 * (step @ step) / res.gamma
        assert res.loss_after < res.loss_before
        assert res.slope > 0
        p = res.params


def test_solve_retry_bumps_lambda():
    G = np.diag([1.0, -1.5e-5])
    delta, lam, bumped = _solve_with_retry(G, 1e-5, np.ones(2))
    assert bumped and lam == 2e-5
    np.testing.assert_allclose((G + lam * np.eye(2)) @ delta, np.ones(2), rtol=1e-10)


def test_solve_retry_gives_up():
    with pytest.raises(NumericalError):
        _solve_with_retry(np.diag([1.0, -1.0]), 1e-5, np.ones(2))


def test_diag_cap_freezes_large_partials(rng):
    energy, _ = make_sl_problem(5, n_train=30, seed=2)
    p = random_params(rng, 1, (3, 3))
    G = energy.flow_matrix(p)
    cap = float(np.median(np.diag(G)))
    res = ngf_step(energy, p, config=NgfConfig(diag_cap=cap))
    moved = res.params.flatten() != p.flatten()
    assert not np.any(moved & (np.diag(G) > cap))


# -- run loops ------------------------------------------------------------

def test_run_ngf_converged_terminates_immediately(rng):
    p = random_params(rng)
    X = rng.uniform(0, 1, (20, 1))
    y = forward_batch(p, X) + 3.1e-4 * np.sign(rng.normal(size=20))
    e = SupervisedL2(X, y)
    assert e.value(p) == pytest.approx(9.61e-8)
    _, rec, flag = run_ngf(e, p, None, NgfConfig(), StopCriteria(tol_abs=1e-5))
    assert flag is StopFlag.EARLY_TERMINATED and len(rec) == 1


def test_run_ngf_constant_energy_saturates():
    e = ClosingQuadratic(constant=3.0)
    _, rec, flag = run_ngf(e, one_param(), None, NgfConfig(), StopCriteria(sat_abs=1e-7))
    assert flag is StopFlag.SATURATED and len(rec) == 6


def test_run_ngf_armijo_failure_is_saturation():
    e = ClosingQuadratic(flip_gradient=True)
    _, rec, flag = run_ngf(e, one_param(), None, NgfConfig(max_halvings=3), StopCriteria())
    assert flag is StopFlag.SATURATED
    assert "armijo_fail" in rec.rows[-1]["event"]


def test_run_ngf_max_epochs(rng):
    energy, _ = make_sl_problem(5, n_train=30, seed=0)
    _, rec, flag = run_ngf(energy, random_params(rng), None, NgfConfig(max_epochs=3),
                           StopCriteria(sat_abs=None, sat_rel=None))
    assert flag is StopFlag.MAX_ITERS and len(rec) == 3
    assert [r["epoch"] for r in rec.rows] == [1, 2, 3]


def test_ngf_monotone_single_batch():
    energy, _ = make_sl_problem(5)
    p = random_params(np.random.default_rng(0), 1, (15, 15))
    _, rec, _ = run_ngf(energy, p, None, NgfConfig(max_epochs=60),
                        StopCriteria(sat_abs=None, sat_rel=None))
    assert np.all(np.diff(rec.losses) <= 0)


@given(seed=st.integers(0, 2**31), adam=st.booleans())
def test_frozen_parameters_untouched(seed, adam):
    rng = np.random.default_rng(seed)
    energy, _ = make_sl_problem(5, n_train=25, seed=seed % 7)
    p = random_params(rng, 1, (3, 3))
    active = p.last_layers_indices(1)
    q = p.with_active(active)
    runner = run_adam if adam else run_ngf
    cfg = AdamConfig(max_iters=5) if adam else NgfConfig(max_epochs=5)
    out, _, _ = runner(energy, q, None, cfg, StopCriteria(sat_abs=None, sat_rel=None))
    frozen = np.setdiff1d(np.arange(p.n_params), active)
    assert np.array_equal(out.flatten()[frozen], p.flatten()[frozen])


def test_adam_zero_gradient(rng):
    p = random_params(rng)
    X = rng.uniform(0, 1, (10, 1))
    e = SupervisedL2(X, forward_batch(p, X))
    out, _, _ = run_adam(e, p, None, AdamConfig(max_iters=10), StopCriteria(sat_abs=None, sat_rel=None))
    assert np.array_equal(out.flatten(), p.flatten())


def test_adam_schedule_recurrence():
    taus = adam_lr_schedule(5e-3, 1e-4, 3)
    assert taus[1] == 5e-3 / 1.0001
    assert taus[2] == taus[1] / 1.0002


def test_adam_records_schedule(rng):
    energy, _ = make_sl_problem(5, n_train=20)
    _, rec, _ = run_adam(energy, random_params(rng), None,
                         AdamConfig(tau0=5e-3, decay_rate=1e-4, max_iters=4),
                         StopCriteria(sat_abs=None, sat_rel=None))
    np.testing.assert_array_equal([r["gamma"] for r in rec.rows], adam_lr_schedule(5e-3, 1e-4, 4))


# -- stopping ---------------------------------------------------------------

def test_stop_absolute():
    assert check_stopping([1.0, 9e-6], StopCriteria(tol_abs=1e-5)) is StopFlag.EARLY_TERMINATED


def test_stop_constant_saturates_at_lookback():
    c = StopCriteria(sat_abs=1e-7)
    losses = [2.0] * 10
    flags = [check_stopping(losses[:k], c) for k in range(1, 11)]
    assert flags[:5] == [None] * 5
    assert flags[5] is StopFlag.SATURATED


def test_stop_relative():
    c = StopCriteria(sat_abs=None, sat_rel=5e-3)
    assert check_stopping([100.2, 0, 0, 0, 0, 100.1], c) is StopFlag.SATURATED


def test_stop_modes():
    c = StopCriteria(tol_abs=1e-5, sat_abs=1.0)
    losses = [1.0] * 5 + [1e-6]
    assert check_stopping(losses, c, "saturation") is StopFlag.SATURATED
    assert check_stopping(losses, c, "abs_tol") is StopFlag.EARLY_TERMINATED
    with pytest.raises(ValueError):
        check_stopping([], c)


# -- record -----------------------------------------------------------------

def test_record_rejects_nonfinite():
    with pytest.raises(NumericalError):
        TrainRecord().append(1, math.nan)


def test_record_csv_roundtrip(tmp_path):
    rec = TrainRecord()
    rec.append(1, 0.1 + 0.2, 10.0, 5e-5, "ngf", "")
    rec.append(2, 1 / 3, math.nan, math.nan, "adam", "switch_adam")
    rec.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "epoch,loss,gamma,lambda,phase,event"
    back = TrainRecord.from_csv(tmp_path / "r.csv")
    assert back.rows[0]["loss"] == 0.1 + 0.2
    assert back.rows[1]["event"] == "switch_adam"


# -- diagnostics ------------------------------------------------------------

def test_diag_identity():
    d = tangent_diagnostics(np.eye(3), np.array([1.0, 0, 0]), 0.5, alpha=1.0)
    assert d["proj_norm"] == pytest.approx(1.0) and d["c_star"] == pytest.approx(1.0)
    assert d["rank"] == 3


def test_diag_zero_gradient():
    d = tangent_diagnostics(np.eye(2), np.zeros(2), 0.0)
    assert d["proj_norm"] == 0.0 and d["c_star"] == 0.0


def test_diag_rank_zero():
    d = tangent_diagnostics(np.zeros((3, 3)), np.zeros(3), 1.0)
    assert d["rank"] == 0 and d["proj_norm"] == 0.0


def test_diag_negative_energy_omits_c_star():
    assert tangent_diagnostics(np.eye(2), np.ones(2), -3.0)["c_star"] is None


def test_diag_c5():
    d = tangent_diagnostics(np.diag([4.0, 1.0]), np.ones(2), 1.0, lam=1.0)
    assert d["c5"] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_diag_matches_gram_schmidt(seed):
    rng = np.random.default_rng(seed)
    n_nodes, D = 7, 3
    T = rng.normal(size=(n_nodes, D))
    w = np.full(n_nodes, 1 / n_nodes)
    target = rng.normal(size=n_nodes)
    G = T.T @ (w[:, None] * T)
    G = 0.5 * (G + G.T)
    grad = T.T @ (w * target)
    d = tangent_diagnostics(G, grad, 1.0)
    assert d["proj_norm"] == pytest.approx(gs_projection_norm(T, target, w), abs=1e-8)
