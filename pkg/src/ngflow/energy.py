"""Quadratic energies of a network output and their tangent data.

Two energies are provided:

* :class:`SupervisedL2` -- the empirical risk ``sum_i w_i (y_i - N(x_i))^2``
  over a discrete sample measure.
* :class:`RitzPoisson1D` -- ``1/2 int (v')^2 - int g v`` on ``[0, 1]`` for
  ``v = m N`` with the boundary mask ``m(x) = 4x(1 - x)``.

Both expose the value, the parameter gradient, the flow matrix (Gramian
of the parameter partials in the ambient inner product) and pairings of
the ambient gradient with arbitrary functions.
"""
from __future__ import annotations

import abc
import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .hilbert import (
    InnerProductSpec,
    QuadratureKind,
    QuadratureRule,
    Space,
    gram_matrix,
    monte_carlo_rule,
)
from .network import NetworkParams, forward_batch, jacobians

__all__ = [
    "Energy",
    "EnergyEval",
    "RitzPoisson1D",
    "SupervisedL2",
    "assemble_flow_matrix",
    "energy_grad_theta",
    "energy_value",
    "hilbert_pairing",
]


@dataclass
class EnergyEval:
    value: float
    grad: Optional[np.ndarray] = None
    gram: Optional[np.ndarray] = None


class Energy(abc.ABC):
    """A quadratic energy ``E(theta) = calE(N(theta))`` over a quadrature rule."""

    rule: QuadratureRule
    space: Space
    #: Hessian of calE in the ambient inner product is this multiple of I.
    curvature: float = 1.0
    #: True when the minimum of calE over the whole space is zero.
    zero_minimum: bool = False

    @property
    def inner(self) -> InnerProductSpec:
        return InnerProductSpec(self.space, self.rule)

    def default_batches(self) -> list[np.ndarray]:
        return [np.arange(len(self.rule))]

    @abc.abstractmethod
    def evaluate(self, params: NetworkParams, batch=None, *, grad: bool = True,
                 gram: bool = False) -> EnergyEval:
        """Value, gradient over active parameters and (optionally) flow matrix."""

    def value(self, params: NetworkParams, batch=None) -> float:
        return self.evaluate(params, batch, grad=False).value

    def grad_theta(self, params: NetworkParams, batch=None) -> np.ndarray:
        return self.evaluate(params, batch).grad

    def flow_matrix(self, params: NetworkParams, batch=None) -> np.ndarray:
        return self.evaluate(params, batch, grad=False, gram=True).gram

    @abc.abstractmethod
    def represent(self, params: NetworkParams, values: np.ndarray,
                  dvalues: Optional[np.ndarray]) -> np.ndarray:
        """Nodal vectors ``r`` with ``(u, v)_H = sum_i w_i r_u[i] r_v[i]``.

        ``values``/``dvalues`` are raw (unmasked) network-type functions
        and their spatial derivatives at the rule nodes; extra trailing
        axes are allowed.
        """

    @abc.abstractmethod
    def gradient_representation(self, params: NetworkParams) -> np.ndarray:
        """``r`` with ``pairing(h) = sum_i w_i r[i] h_H[i] + linear_term(h)``."""

    @abc.abstractmethod
    def pairing(self, params: NetworkParams, h_values, h_dx_values=None) -> float:
        """``<grad_H calE(model), h>_H`` for ``h`` given at the rule nodes."""


def _check_batch(n: int, batch) -> np.ndarray:
    if batch is None:
        return np.arange(n)
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch is empty")
    return batch


class SupervisedL2(Energy):
    """Weighted squared-error risk over a discrete sample measure.

    The gradient pairing follows the factor-2 convention of the risk,
    ``<grad, h> = 2 sum_i w_i (N(x_i) - y_i) h(x_i)``.
    """

    space = Space.L2_DISCRETE
    curvature = 2.0
    zero_minimum = True

    def __init__(self, X, y, weights=None, batches=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
            raise ValueError("X and y must be nonempty and of equal length")
        self.X = X
        self.y = y
        rule = monte_carlo_rule(X)
        if weights is not None:
            # a sample measure: weights are rescaled to total mass 1
            weights = np.asarray(weights, dtype=np.float64).ravel()
            if weights.shape != y.shape or np.any(weights < 0) or not weights.sum() > 0:
                raise ValueError("weights must be nonnegative, not all zero, one per sample")
            rule = QuadratureRule(X, weights / weights.sum(), QuadratureKind.MONTE_CARLO)
        self.rule = rule
        self._batches = None if batches is None else [np.asarray(b, dtype=int) for b in batches]

    def default_batches(self) -> list[np.ndarray]:
        return self._batches if self._batches is not None else super().default_batches()

    def _weights(self, batch: np.ndarray) -> np.ndarray:
        w = self.rule.weights[batch]
        return w / w.sum()

    def evaluate(self, params, batch=None, *, grad=True, gram=False):
        batch = _check_batch(len(self.rule), batch)
        w = self._weights(batch)
        X = self.X[batch]
        if not (grad or gram):
            r = self.y[batch] - forward_batch(params, X)
            return EnergyEval(float(w @ (r * r)))
        bj = jacobians(params, X)
        r = self.y[batch] - bj.value
        out = EnergyEval(float(w @ (r * r)))
        if grad:
            out.grad = -2.0 * (bj.jac.T @ (w * r))
        if gram:
            out.gram = gram_matrix(w, bj.jac)
        return out

    def represent(self, params, values, dvalues=None):
        return values

    def gradient_representation(self, params):
        return 2.0 * (forward_batch(params, self.X) - self.y)

    def pairing(self, params, h_values, h_dx_values=None):
        h = np.asarray(h_values, dtype=np.float64)
        if h.shape != self.y.shape:
            raise ValueError(f"h must have one value per node ({self.y.shape[0]})")
        return float(self.rule.weights @ (self.gradient_representation(params) * h))

    def residual_values(self, params) -> np.ndarray:
        return forward_batch(params, self.X) - self.y

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            d = self.X.shape[1]
            writer.writerow([f"x{i + 1}" for i in range(d)] + ["y", "weight"])
            for xi, yi, wi in zip(self.X, self.y, self.rule.weights):
                writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi)), repr(float(wi))])

    @classmethod
    def from_csv(cls, path) -> "SupervisedL2":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-2], data[:, -2], data[:, -1])


def mask(x):
    return -4.0 * (x * x - x)


def mask_dx(x):
    return -8.0 * x + 4.0


class RitzPoisson1D(Energy):
    """Ritz energy of ``-u'' = g`` on ``[0, 1]`` with zero boundary values.

    The trial function is ``v = m N`` with ``m(x) = 4x(1 - x)``; the
    energy ``1/2 sum w (v')^2 - sum w g v`` always uses the whole rule.
    """

    space = Space.H1_0_SEMINORM
    curvature = 1.0
    zero_minimum = False

    def __init__(self, forcing: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule):
        if rule.kind is not QuadratureKind.TRAPEZOID or rule.interval != (0.0, 1.0):
            raise ValueError("Ritz energy needs a trapezoid rule spanning [0, 1]")
        self.rule = rule
        self.forcing = forcing
        self.x = rule.nodes[:, 0]
        self.m = mask(self.x)
        self.mx = mask_dx(self.x)
        self.g = np.asarray(forcing(self.x), dtype=np.float64)

    def _full(self, batch):
        if batch is not None and len(batch) != len(self.rule):
            raise ValueError("the Ritz energy is evaluated on the full rule only")

    def evaluate(self, params, batch=None, *, grad=True, gram=False):
        self._full(batch)
        w = self.rule.weights
        bj = jacobians(params, self.rule.nodes, dx=0, columns=None if (grad or gram) else [])
        v = self.m * bj.value
        vx = self.mx * bj.value + self.m * bj.dvalue_dx
        out = EnergyEval(float(0.5 * (w @ (vx * vx)) - w @ (self.g * v)))
        if grad or gram:
            dv = self.m[:, None] * bj.jac
            dvx = self.mx[:, None] * bj.jac + self.m[:, None] * bj.jac_mixed
            if grad:
                out.grad = dvx.T @ (w * vx) - dv.T @ (w * self.g)
            if gram:
                out.gram = gram_matrix(w, dvx)
        return out

    def model_values(self, params) -> tuple[np.ndarray, np.ndarray]:
        """Masked model ``v`` and ``v'`` at the rule nodes."""
        bj = jacobians(params, self.rule.nodes, dx=0, columns=[])
        return self.m * bj.value, self.mx * bj.value + self.m * bj.dvalue_dx

    def represent(self, params, values, dvalues=None):
        if dvalues is None:
            raise ValueError("H1_0 representation needs derivative values")
        shape = (-1,) + (1,) * (np.ndim(values) - 1)
        return self.mx.reshape(shape) * values + self.m.reshape(shape) * dvalues

    def gradient_representation(self, params):
        return self.model_values(params)[1]

    def linear_term(self, h_values) -> float:
        return float(self.rule.weights @ (self.g * h_values))

    def pairing(self, params, h_values, h_dx_values=None):
        if h_dx_values is None:
            raise ValueError("Ritz pairing needs h' at the nodes")
        h = np.asarray(h_values, dtype=np.float64)
        hx = np.asarray(h_dx_values, dtype=np.float64)
        _, vx = self.model_values(params)
        w = self.rule.weights
        return float(w @ (vx * hx) - w @ (self.g * h))


def energy_value(spec: Energy, params: NetworkParams, batch=None) -> float:
    return spec.value(params, batch)


def energy_grad_theta(spec: Energy, params: NetworkParams, batch=None) -> np.ndarray:
    return spec.grad_theta(params, batch)


def assemble_flow_matrix(spec: Energy, params: NetworkParams, batch=None,
                         active_set=None) -> np.ndarray:
    """Flow matrix on ``active_set`` (flat indices; default: active mask)."""
    if active_set is not None:
        active_set = np.asarray(active_set, dtype=int)
        if active_set.size == 0:
            raise ValueError("active_set is empty")
        params = params.with_active(active_set)
    return spec.flow_matrix(params, batch)


def hilbert_pairing(spec: Energy, params: NetworkParams, h_values,
                    h_dx_values=None) -> float:
    return spec.pairing(params, h_values, h_dx_values)
