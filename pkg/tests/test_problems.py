import json

import numpy as np
import pytest

from ngflow import problems
from ngflow.network import Architecture, BlockParams, NetworkParams
from ngflow.problems import (
    BurgersSpec,
    burgers_simulate,
    exact_ritz_energy,
    make_mor_dataset,
    make_mor_problem,
    make_ritz_problem,
    make_sl_problem,
    oscillatory_target,
    oscillatory_target_dx,
    poisson_forcing,
)


@pytest.fixture(scope="module")
def mor():
    return make_mor_dataset()


def test_target_value():
    assert oscillatory_target(1, 0.5) == pytest.approx(np.e - 1.375, abs=1e-12)
    assert oscillatory_target(1, 0.5) == pytest.approx(1.343282, abs=1e-6)


def test_forcing_values():
    assert poisson_forcing(5, 0.0) == pytest.approx(-25 * np.pi**2, rel=1e-14)
    assert poisson_forcing(5, 0.0) == pytest.approx(-246.7401, abs=1e-4)
    assert poisson_forcing(5, 1.0) == pytest.approx(-252.7401, abs=1e-4)


@pytest.mark.parametrize("k", [1, 5, 10])
def test_derivatives_match_finite_differences(k):
    x = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd1 = (oscillatory_target(k, x + h) - oscillatory_target(k, x - h)) / (2 * h)
    np.testing.assert_allclose(oscillatory_target_dx(k, x), fd1, rtol=1e-6, atol=1e-5)
    h = 1e-4
    fd2 = (oscillatory_target(k, x + h) - 2 * oscillatory_target(k, x)
           + oscillatory_target(k, x - h)) / h**2
    np.testing.assert_allclose(poisson_forcing(k, x), -fd2, rtol=1e-5, atol=1e-2)


def test_exact_ritz_energy():
    assert exact_ritz_energy(5) == pytest.approx(-110.90, abs=5e-3)
    assert exact_ritz_energy(10) == pytest.approx(-392.29, abs=5e-3)
    for k in (5, 10):
        assert exact_ritz_energy(k, form="parts") == pytest.approx(exact_ritz_energy(k), rel=1e-6)


def test_sl_problem_shapes():
    energy, test = make_sl_problem(5, n_train=50, n_test=31, seed=4)
    assert energy.X.shape == (50, 1) and test.X.shape == (31, 1)
    assert np.all((energy.X >= 0) & (energy.X <= 1))
    np.testing.assert_array_equal(energy.y, oscillatory_target(5, energy.X[:, 0]))
    again, _ = make_sl_problem(5, n_train=50, n_test=31, seed=4)
    np.testing.assert_array_equal(energy.X, again.X)


def test_ritz_problem_nodes():
    energy, test = make_ritz_problem(5, 401)
    assert energy.rule.nodes.shape == (401, 1)
    assert energy.rule.weights.sum() == pytest.approx(1.0)
    assert test.kind == "ritz" and test.y_dx is not None


def _zero_net(input_dim=1):
    return NetworkParams(Architecture(input_dim, (1,)),
                         [BlockParams(np.zeros((1, input_dim)), np.zeros(1))], np.zeros(1))


def test_error_metrics_hand_values():
    net = _zero_net()
    ts = problems.TestSet(np.array([[0.2], [0.7]]), np.array([1.0, np.sqrt(3.0)]),
                          np.array([0.5, 0.5]), "sl")
    assert problems.test_errors(net, ts, "L2") == pytest.approx(np.sqrt(2.0), rel=1e-15)
    ts = problems.TestSet(np.array([[0.1], [0.5], [0.9]]), np.full(3, -0.3), np.ones(3), "mor")
    assert problems.test_errors(net, ts) == pytest.approx(0.3, rel=1e-15)
    ts = problems.TestSet(np.array([[0.3]]), np.zeros(1), np.ones(1), "sl")
    assert problems.test_errors(net, ts) == 0.0
    with pytest.raises(ValueError):
        problems.test_errors(net, ts, "H1")
    with pytest.raises(ValueError):
        problems.test_errors(net, ts, "Linf")


def test_h1_error_of_zero_network():
    _, test = make_ritz_problem(5, n_test=2001)
    err = problems.test_errors(_zero_net(), test, "H1")
    # |u'|_{L2} = sqrt(-2 * Ritz energy)
    assert err == pytest.approx(np.sqrt(-2 * exact_ritz_energy(5)), rel=1e-4)


# -- Burgers ----------------------------------------------------------------

def test_burgers_initial_row():
    u = burgers_simulate(BurgersSpec(mu=0.02, nt=5))
    assert u.shape == (6, 21)
    assert u[0, 0] == 4.25 and np.all(u[0, 1:] == 1.0)


def test_burgers_zero_source_constant_state():
    u = burgers_simulate(BurgersSpec(mu=0.02, nt=50, source_coeff=0.0, inflow=1.0))
    np.testing.assert_array_equal(u, np.ones_like(u))


def test_burgers_satisfies_scheme():
    spec = BurgersSpec(mu=0.027, nt=100)
    u = burgers_simulate(spec)
    x = np.linspace(0, 1, spec.nx)
    r = spec.dt / spec.dx
    for n in range(1, spec.nt + 1):
        v, left = u[n, 1:], u[n, :-1]
        F = v - u[n - 1, 1:] + 0.5 * r * (v**2 - left**2) - spec.dt * 0.02 * np.exp(spec.mu * x[1:])
        assert np.max(np.abs(F)) <= 1e-9


def test_burgers_front_properties():
    u = burgers_simulate(BurgersSpec(mu=0.02))
    assert u.min() >= 1.0 - 1e-8
    assert np.all(np.diff(u, axis=0) >= -1e-12)
    assert np.all(u[:, 0] == 4.25)


def test_burgers_spec_roundtrip():
    spec = BurgersSpec(mu=0.0213, nt=40)
    assert BurgersSpec.from_json(spec.to_json()) == spec
    assert json.loads(spec.to_json())["nx"] == 21
    with pytest.raises(ValueError):
        BurgersSpec(mu=0.02, nx=1)


def test_mor_counts(mor):
    assert mor.train.shape == (4620, 4)
    assert mor.test.shape == (2520, 4)
    assert len(mor.batches) == 11 and all(b.size == 420 for b in mor.batches)
    assert not np.intersect1d(mor.train_mus, mor.test_mus).size
    ts = np.unique(mor.train[:, 1])
    np.testing.assert_allclose(ts, np.arange(1, 21) * 1.0)


def test_mor_batches_group_by_parameter(mor):
    for b, mu in zip(mor.batches, mor.train_mus):
        assert np.all(mor.train[b, 2] == mu)


def test_mor_csv_deterministic(mor, tmp_path):
    mor.to_csv(tmp_path / "a.csv")
    make_mor_dataset().to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "x,t,mu,u"


def test_mor_problem_scaled_inputs(mor):
    energy, test, _ = make_mor_problem(mor)
    for X in (energy.X, test.X):
        assert X.shape[1] == 3
        assert X.min() >= 0.0 and X.max() <= 1.0
    assert len(energy.default_batches()) == 11


def test_overlapping_parameters_rejected():
    with pytest.raises(ValueError):
        make_mor_dataset(train_mus=[0.02, 0.025], test_mus=[0.02],
                         template=BurgersSpec(mu=0.02, nt=20))
