"""Test problems: an oscillatory 1D target, a Poisson problem with the same
exact solution, and snapshots of a parametrized inviscid Burgers equation.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .energy import RitzPoisson1D, SupervisedL2, mask, mask_dx
from .hilbert import QuadratureRule, trapezoid_rule
from .network import NetworkParams, features_with_dx, forward_batch

logger = logging.getLogger(__name__)

__all__ = [
    "BurgersSpec",
    "MorDataset",
    "NewtonConvergenceError",
    "TestSet",
    "burgers_simulate",
    "exact_ritz_energy",
    "make_mor_dataset",
    "make_ritz_problem",
    "make_sl_problem",
    "oscillatory_target",
    "oscillatory_target_dx",
    "poisson_forcing",
    "test_errors",
]


def oscillatory_target(k: float, x) -> np.ndarray:
    """``u(x) = exp(sin(k pi x)) + x^3 - x - 1``."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(np.sin(k * np.pi * x)) + x**3 - x - 1.0


def oscillatory_target_dx(k: float, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    kp = k * np.pi
    return kp * np.cos(kp * x) * np.exp(np.sin(kp * x)) + 3.0 * x**2 - 1.0


def poisson_forcing(k: float, x) -> np.ndarray:
    """``g = -u''`` for the oscillatory target ``u``."""
    x = np.asarray(x, dtype=np.float64)
    kp = k * np.pi
    s, c = np.sin(kp * x), np.cos(kp * x)
    return -(kp**2 * np.exp(s) * (c * c - s) + 6.0 * x)


def exact_ritz_energy(k: float, n: int = 100_001, form: str = "direct") -> float:
    """Ritz energy of the exact solution on a fine trapezoid rule.

    ``form="direct"`` evaluates ``1/2 int (u')^2 - int g u``;
    ``form="parts"`` evaluates ``-1/2 int (u')^2``, equal after
    integration by parts since ``u`` vanishes at both ends.
    """
    rule = trapezoid_rule(n)
    x = rule.nodes[:, 0]
    ux = oscillatory_target_dx(k, x)
    if form == "direct":
        return 0.5 * rule.integrate(ux * ux) - rule.integrate(poisson_forcing(k, x) * oscillatory_target(k, x))
    if form == "parts":
        return -0.5 * rule.integrate(ux * ux)
    raise ValueError(f"unknown form {form!r}")


@dataclass
class TestSet:
    """Evaluation points with weights; ``kind`` is ``"sl"``, ``"ritz"`` or ``"mor"``."""

    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    kind: str
    y_dx: Optional[np.ndarray] = None
    rule: Optional[QuadratureRule] = None


def make_sl_problem(k: float, n_train: int = 201, n_test: int = 301, seed: int = 0,
                    n_batches: int = 1) -> tuple[SupervisedL2, TestSet]:
    """Uniform random training abscissae and a uniform test grid on [0, 1]."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n_train)
    batches = None
    if n_batches > 1:
        batches = np.array_split(np.arange(n_train), n_batches)
    energy = SupervisedL2(x[:, None], oscillatory_target(k, x), batches=batches)
    xt = np.linspace(0.0, 1.0, n_test)
    test = TestSet(xt[:, None], oscillatory_target(k, xt), np.full(n_test, 1.0 / n_test), "sl")
    return energy, test


def make_ritz_problem(k: float, n_nodes: int = 401, n_test: int = 301
                      ) -> tuple[RitzPoisson1D, TestSet]:
    energy = RitzPoisson1D(lambda x: poisson_forcing(k, x), trapezoid_rule(n_nodes))
    rule = trapezoid_rule(n_test)
    xt = rule.nodes[:, 0]
    test = TestSet(rule.nodes, oscillatory_target(k, xt), rule.weights, "ritz",
                   y_dx=oscillatory_target_dx(k, xt), rule=rule)
    return energy, test


def _model_on_test(params: NetworkParams, test: TestSet):
    if test.kind == "ritz":
        z, zd = features_with_dx(params, test.X)
        N, Nx = z @ params.closing, zd @ params.closing
        x = test.X[:, 0]
        return mask(x) * N, mask_dx(x) * N + mask(x) * Nx
    return forward_batch(params, test.X), None


def test_errors(params: NetworkParams, testset: TestSet, metric: str = "L2") -> float:
    """``L2``: weighted root-mean-square error; ``H1``: ``sqrt(int (v' - u')^2)``."""
    metric = metric.upper()
    if metric not in ("L2", "H1"):
        raise ValueError(f"unknown metric {metric!r}")
    if metric == "H1" and testset.kind != "ritz":
        raise ValueError("H1 error is only defined for the Poisson test set")
    v, vx = _model_on_test(params, testset)
    w = testset.weights
    if metric == "L2":
        r = v - testset.y
        return float(np.sqrt((w @ (r * r)) / w.sum()))
    r = vx - testset.y_dx
    return float(np.sqrt(w @ (r * r)))


# -- Burgers -------------------------------------------------------------


class NewtonConvergenceError(RuntimeError):
    def __init__(self, step: int, residual: float):
        self.step = step
        self.residual = residual
        super().__init__(f"Newton failed at time step {step} (residual {residual:.3e})")


@dataclass(frozen=True)
class BurgersSpec:
    mu: float
    nx: int = 21
    nt: int = 400
    t_final: float = 20.0
    source_coeff: float = 0.02
    inflow: float = 4.25
    initial_value: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50

    def __post_init__(self):
        if self.nx < 2 or self.nt < 1:
            raise ValueError("need nx >= 2 and nt >= 1")

    @property
    def dx(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def dt(self) -> float:
        return self.t_final / self.nt

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "BurgersSpec":
        return cls(**json.loads(text))


def burgers_simulate(spec: BurgersSpec) -> np.ndarray:
    """Implicit upwind solution of ``u_t + (u^2/2)_x = c exp(mu x)``.

    Backward Euler in time with a first-order upwind flux difference; the
    left value is pinned to the inflow state. Each step's Newton system
    is lower bidiagonal and is solved by forward substitution.
    Returns ``u`` of shape ``(nt + 1, nx)``.
    """
    x = np.linspace(0.0, 1.0, spec.nx)
    r = spec.dt / spec.dx
    src = spec.dt * spec.source_coeff * np.exp(spec.mu * x[1:])
    u = np.full(spec.nx, spec.initial_value)
    u[0] = spec.inflow
    out = np.empty((spec.nt + 1, spec.nx))
    out[0] = u
    for n in range(1, spec.nt + 1):
        old = u[1:].copy()
        v = old.copy()
        for _ in range(spec.newton_max_iter):
            left = np.concatenate(([spec.inflow], v[:-1]))
            F = v - old + 0.5 * r * (v * v - left * left) - src
            res = float(np.max(np.abs(F)))
            if res <= spec.newton_tol:
                break
            diag = 1.0 + r * v
            sub = -r * v[:-1]  # dF_i / dv_{i-1}
            step = np.empty_like(v)
            step[0] = F[0] / diag[0]
            for i in range(1, v.size):
                step[i] = (F[i] - sub[i - 1] * step[i - 1]) / diag[i]
            v = v - step
        else:
            left = np.concatenate(([spec.inflow], v[:-1]))
            F = v - old + 0.5 * r * (v * v - left * left) - src
            res = float(np.max(np.abs(F)))
            if res > spec.newton_tol:
                raise NewtonConvergenceError(n, res)
        u = np.concatenate(([spec.inflow], v))
        out[n] = u
    return out


@dataclass
class MorDataset:
    """Snapshot rows ``(x, t, mu, u)`` with one batch per training ``mu``."""

    train: np.ndarray  # (n, 4)
    test: np.ndarray
    train_mus: np.ndarray
    test_mus: np.ndarray
    batches: list[np.ndarray]

    def to_csv(self, path, which: str = "train") -> None:
        rows = {"train": self.train, "test": self.test}[which]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "t", "mu", "u"])
            for row in rows:
                writer.writerow([repr(float(v)) for v in row])


def snapshot_rows(spec: BurgersSpec, every: int = 20) -> np.ndarray:
    u = burgers_simulate(spec)
    x = np.linspace(0.0, 1.0, spec.nx)
    rows = []
    for n in range(every, spec.nt + 1, every):
        t = n * spec.dt
        rows.append(np.column_stack([x, np.full(spec.nx, t), np.full(spec.nx, spec.mu), u[n]]))
    return np.vstack(rows)


def make_mor_dataset(train_mus: Optional[Sequence[float]] = None,
                     test_mus: Optional[Sequence[float]] = None,
                     template: Optional[BurgersSpec] = None, seed: int = 0,
                     every: int = 20) -> MorDataset:
    """Snapshots for 11 uniform training ``mu`` and 6 random test ``mu``."""
    template = template or BurgersSpec(mu=0.015)
    if train_mus is None:
        train_mus = np.linspace(0.015, 0.030, 11)
    if test_mus is None:
        test_mus = np.sort(np.random.default_rng(seed).uniform(0.015, 0.030, 6))
    train_mus = np.asarray(train_mus, dtype=np.float64)
    test_mus = np.asarray(test_mus, dtype=np.float64)
    if np.intersect1d(train_mus, test_mus).size:
        raise ValueError("train and test parameter values overlap")

    def rows(mu):
        spec = BurgersSpec(**{**asdict(template), "mu": float(mu)})
        return snapshot_rows(spec, every)

    train_parts = [rows(mu) for mu in train_mus]
    test_parts = [rows(mu) for mu in test_mus]
    per_mu = (template.nt // every) * template.nx
    if any(p.shape[0] != per_mu for p in train_parts + test_parts):
        raise AssertionError("snapshot count per parameter value is off")
    train = np.vstack(train_parts)
    test = np.vstack(test_parts)
    if train.shape[0] != len(train_mus) * per_mu or test.shape[0] != len(test_mus) * per_mu:
        raise AssertionError("dataset row counts are off")
    batches = [np.arange(i * per_mu, (i + 1) * per_mu) for i in range(len(train_mus))]
    return MorDataset(train, test, train_mus, test_mus, batches)


def scale_mor_inputs(rows: np.ndarray, t_final: float = 20.0,
                     mu_range: tuple[float, float] = (0.015, 0.030)) -> np.ndarray:
    """Map ``(x, t, mu)`` to ``[0, 1]^3``."""
    lo, hi = mu_range
    return np.column_stack([rows[:, 0], rows[:, 1] / t_final, (rows[:, 2] - lo) / (hi - lo)])


def make_mor_problem(dataset: Optional[MorDataset] = None, seed: int = 0
                     ) -> tuple[SupervisedL2, TestSet, MorDataset]:
    dataset = dataset or make_mor_dataset(seed=seed)
    energy = SupervisedL2(scale_mor_inputs(dataset.train), dataset.train[:, 3],
                          batches=dataset.batches)
    n = dataset.test.shape[0]
    test = TestSet(scale_mor_inputs(dataset.test), dataset.test[:, 3], np.full(n, 1.0 / n), "mor")
    return energy, test, dataset


def write_dataset_csv(path, energy: SupervisedL2) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    energy.to_csv(path)
