"""Dense symmetric linear algebra for flow matrices.

Flow matrices here are small (a few hundred rows at most), dense and
frequently rank deficient, so everything runs in float64 on plain
numpy arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

logger = logging.getLogger(__name__)

__all__ = [
    "EigenDecomp",
    "EigenConvergenceError",
    "FactorizationError",
    "as_sym_matrix",
    "lstsq",
    "solve_spd_regularized",
    "sym_eig",
]


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization of ``G + lambda*I`` broke down."""

    def __init__(self, pivot_index: int, pivot_value: float, lam: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        self.lam = lam
        super().__init__(
            f"G + {lam:g}*I is not positive definite: pivot {pivot_index} "
            f"has value {pivot_value:.3e}"
        )


class EigenConvergenceError(np.linalg.LinAlgError):
    def __init__(self, off_norm: float, sweeps: int):
        self.off_norm = off_norm
        self.sweeps = sweeps
        super().__init__(
            f"Jacobi iteration did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {off_norm:.3e})"
        )


@dataclass(frozen=True)
class EigenDecomp:
    """Eigenpairs of a symmetric matrix, eigenvalues sorted descending.

    Column ``i`` of ``eigenvectors`` belongs to ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def singular_values(self) -> np.ndarray:
        """``s_i = sqrt(max(eigenvalue_i, 0))`` for a Gramian ``V S^2 V^T``."""
        return np.sqrt(np.clip(self.eigenvalues, 0.0, None))

    def rank(self, rel_tol: float = 1e-10) -> int:
        s = self.singular_values
        if s.size == 0 or s[0] <= 0.0:
            return 0
        return int(np.count_nonzero(s > rel_tol * s[0]))

    @property
    def negative_eigenvalues(self) -> np.ndarray:
        """Eigenvalues below ``-1e-8`` times the largest one."""
        scale = max(float(np.max(np.abs(self.eigenvalues), initial=0.0)), 0.0)
        return self.eigenvalues[self.eigenvalues < -1e-8 * scale]


def as_sym_matrix(G, *, check: bool = True) -> np.ndarray:
    """Return ``G`` as a float64 square array, validating symmetry."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {G.shape}")
    if check:
        if not np.all(np.isfinite(G)):
            raise ValueError("matrix has non-finite entries")
        if not np.array_equal(G, G.T):
            raise ValueError("matrix is not exactly symmetric")
    return G


def solve_spd_regularized(G, lam: float, rhs) -> np.ndarray:
    """Solve ``(G + lam*I) x = rhs`` by Cholesky.

    ``G`` must be symmetric positive semidefinite up to roundoff. One
    step of iterative refinement is applied after the triangular solves.

    Raises
    ------
    FactorizationError
        If ``G + lam*I`` is numerically indefinite. The exception carries
        the index and value of the failing pivot.
    """
    G = as_sym_matrix(G, check=False)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if rhs.shape != (G.shape[0],):
        raise ValueError(
            f"rhs has shape {rhs.shape}, expected ({G.shape[0]},)"
        )
    if G.shape[0] == 0:
        return np.zeros(0)
    A = G + lam * np.eye(G.shape[0])
    c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        k = info - 1
        pivot = A[k, k] - np.dot(c[k, :k], c[k, :k])
        raise FactorizationError(k, float(pivot), lam)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf illegal argument {-info}")
    x, info = lapack.dpotrs(c, rhs, lower=1)
    r = rhs - A @ x
    dx, _ = lapack.dpotrs(c, r, lower=1)
    return x + dx


def _round_robin_schedule(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (p, q), p < q, once per sweep.

    Each round holds disjoint pairs, so its rotations commute and can be
    applied together.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=int), np.array(qs, dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(A: np.ndarray) -> float:
    return float(np.linalg.norm(A - np.diag(np.diag(A))))


JACOBI_MAX_DIM = 256


def sym_eig(G, *, tol: float = 1e-15, max_sweeps: int = 60,
            method: str = "auto") -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix.

    ``method="jacobi"`` runs cyclic Jacobi rotations, ordered
    round-robin so that each round of ``n/2`` disjoint rotations is
    applied as one vectorized update. ``method="lapack"`` calls
    ``numpy.linalg.eigh``. ``"auto"`` uses Jacobi up to
    ``JACOBI_MAX_DIM`` rows, where it is fast enough.
    Negative eigenvalues are returned as computed; callers decide
    whether to clip them.
    """
    A = as_sym_matrix(G).copy()
    n = A.shape[0]
    if method not in ("auto", "jacobi", "lapack"):
        raise ValueError(f"unknown method {method!r}")
    if method == "lapack" or (method == "auto" and n > JACOBI_MAX_DIM):
        w, V = np.linalg.eigh(A)
        return _finish(w, V.T)
    Vt = np.eye(n)  # rows are eigenvectors
    if n <= 1:
        return EigenDecomp(np.diag(A).copy(), Vt)
    schedule = _round_robin_schedule(n)
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return EigenDecomp(np.zeros(n), Vt)
    off = _off_norm(A)
    sweeps = 0
    while off > tol * scale:
        if sweeps >= max_sweeps:
            raise EigenConvergenceError(float(off), sweeps)
        for p, q in schedule:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = A[p, p], A[q, q]
            theta = (aqq - app) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J as two row updates; J^T (J^T A)^T = J^T A J by symmetry
            for _ in range(2):
                Ap, Aq = A[p], A[q]
                A[p] = c[:, None] * Ap - s[:, None] * Aq
                A[q] = s[:, None] * Ap + c[:, None] * Aq
                A = np.ascontiguousarray(A.T)
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = Vt[p], Vt[q]
            Vt[p] = c[:, None] * Vp - s[:, None] * Vq
            Vt[q] = s[:, None] * Vp + c[:, None] * Vq
        sweeps += 1
        off = _off_norm(A)
    return _finish(np.diag(A).copy(), Vt)


def _finish(w: np.ndarray, Vt: np.ndarray) -> EigenDecomp:
    order = np.argsort(-w, kind="stable")
    decomp = EigenDecomp(w[order], Vt[order].T.copy())
    neg = decomp.negative_eigenvalues
    if neg.size:
        logger.warning(
            "sym_eig: %d eigenvalues below -1e-8*max (min %.3e)",
            neg.size,
            neg.min(),
        )
    return decomp


def lstsq(A, b) -> np.ndarray:
    """Minimum-norm least-squares solution of ``A x ~ b``."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}")
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x
