"""Quadrature rules and the ambient inner products built on them."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "InnerProductSpec",
    "QuadratureKind",
    "QuadratureRule",
    "Space",
    "inner_product",
    "gram_matrix",
    "monte_carlo_rule",
    "trapezoid_rule",
]


class QuadratureKind(str, Enum):
    MONTE_CARLO = "monte_carlo"
    TRAPEZOID = "trapezoid"


class Space(str, Enum):
    L2_DISCRETE = "L2_discrete"
    H1_0_SEMINORM = "H1_0_seminorm"


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)
    kind: QuadratureKind
    interval: Optional[tuple[float, float]] = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        weights = np.asarray(self.weights, dtype=np.float64)
        if nodes.shape[0] != weights.shape[0] or weights.ndim != 1:
            raise ValueError("nodes and weights must have the same length")
        if np.any(weights < 0):
            raise ValueError("quadrature weights must be nonnegative")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "kind", QuadratureKind(self.kind))

    def __len__(self) -> int:
        return self.weights.shape[0]

    def integrate(self, values) -> float:
        return float(self.weights @ np.asarray(values, dtype=np.float64))

    def subset(self, idx) -> "QuadratureRule":
        """Restriction to ``idx`` with weights rescaled to the same total."""
        idx = np.asarray(idx, dtype=int)
        w = self.weights[idx]
        w = w * (self.weights.sum() / w.sum())
        return QuadratureRule(self.nodes[idx], w, self.kind, self.interval)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(self.nodes.shape[1])] + ["weight"])
            for row, w in zip(self.nodes, self.weights):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])

    @classmethod
    def from_csv(cls, path, kind) -> "QuadratureRule":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1], kind)


def trapezoid_rule(n: int, a: float = 0.0, b: float = 1.0) -> QuadratureRule:
    """Composite trapezoid rule on ``n`` equispaced nodes including ``a`` and ``b``."""
    if n < 2:
        raise ValueError("trapezoid rule needs n >= 2")
    if not a < b:
        raise ValueError("need a < b")
    x = np.linspace(a, b, n)
    h = (b - a) / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return QuadratureRule(x, w, QuadratureKind.TRAPEZOID, (float(a), float(b)))


def monte_carlo_rule(samples) -> QuadratureRule:
    """Equal weights ``1/M`` on the given sample points."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("need at least one sample")
    m = samples.shape[0]
    return QuadratureRule(samples, np.full(m, 1.0 / m), QuadratureKind.MONTE_CARLO)


@dataclass(frozen=True)
class InnerProductSpec:
    space: Space
    rule: QuadratureRule

    def __post_init__(self):
        object.__setattr__(self, "space", Space(self.space))
        if self.space is Space.H1_0_SEMINORM:
            if self.rule.kind is not QuadratureKind.TRAPEZOID or self.rule.interval != (0.0, 1.0):
                raise ValueError("H1_0 seminorm requires a trapezoid rule on [0, 1]")


def inner_product(spec: InnerProductSpec, u, v, u_dx=None, v_dx=None) -> float:
    """``(u, v)_H`` from nodal values (and derivatives for H1_0)."""
    w = spec.rule.weights
    if spec.space is Space.H1_0_SEMINORM:
        if u_dx is None or v_dx is None:
            raise ValueError("H1_0 inner product needs derivative values")
        a, b = np.asarray(u_dx, dtype=np.float64), np.asarray(v_dx, dtype=np.float64)
    else:
        a, b = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if a.shape != w.shape or b.shape != w.shape:
        raise ValueError(f"nodal arrays must have length {w.shape[0]}")
    return float(np.sum(w * a * b))


def gram_matrix(weights: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``A^T diag(weights) A`` symmetrized exactly."""
    G = A.T @ (weights[:, None] * A)
    return 0.5 * (G + G.T)
