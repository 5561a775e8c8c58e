"""Training that grows the network by one block whenever the loss saturates.

After each insertion the new block is initialized either randomly or by
gradient alignment. The aligned variant draws ``K`` random candidate
blocks; for each it chooses the closing-vector update ``xi`` so that the
change of the network output, projected on the span of the new block's
outputs, points along the negative ambient gradient. The candidate with
the lowest energy wins.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .energy import Energy
from .linalg import lstsq
from .network import BlockParams, NetworkParams, add_layer, features_with_dx
from .optimizers import (
    AdamConfig,
    NgfConfig,
    NumericalError,
    StopCriteria,
    StopFlag,
    TrainRecord,
    epoch_loss,
    run_adam,
    run_ngf,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AlignmentCandidate",
    "ExpansionConfig",
    "aligned_init_new_layer",
    "alignment_system",
    "random_init_new_layer",
    "run_expansive_training",
]


@dataclass
class ExpansionConfig:
    max_expansions: int = 6
    new_width: Optional[int] = None
    init_method: str = "gradient_aligned"
    K: int = 20
    alpha0: float = 1e-3
    random_scale: float = 0.5
    drop_tol: float = 1e-10
    basis: str = "full"
    term_abs: Optional[float] = None
    term_rel: Optional[float] = None
    max_total_iters: int = 3000

    def __post_init__(self):
        if self.basis not in ("full", "xi"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.init_method not in ("random", "gradient_aligned"):
            raise ValueError(f"unknown init_method {self.init_method!r}")
        if self.K < 1 or self.max_expansions < 0 or self.max_total_iters < 1:
            raise ValueError("need K >= 1, max_expansions >= 0, max_total_iters >= 1")
        if self.new_width is not None and self.new_width < 1:
            raise ValueError("new_width must be >= 1")
        if not self.alpha0 > 0 or self.random_scale < 0:
            raise ValueError("alpha0 must be positive and random_scale nonnegative")


@dataclass
class AlignmentCandidate:
    W: np.ndarray
    b: np.ndarray
    xi: np.ndarray
    alpha: float
    energy_after: float
    rank: int = 0
    index: int = 0


def random_init_new_layer(params: NetworkParams, m: Optional[int], scale: float,
                          rng: np.random.Generator) -> NetworkParams:
    """Insert a block and draw its weights and the closing update from U[-scale, scale]."""
    new, _ = add_layer(params, m)
    m = new.arch.widths[-1]
    d = new.arch.dims[-2]
    W = rng.uniform(-scale, scale, size=(m, d))
    b = rng.uniform(-scale, scale, size=m)
    xi = rng.uniform(-scale, scale, size=m)
    new.blocks[-1] = BlockParams(W, b)
    new.closing = new.closing + xi
    return new


def _mgs(reps: np.ndarray, w: np.ndarray, drop_tol: float) -> np.ndarray:
    """Coefficients ``C`` with ``reps @ C`` orthonormal in ``sum w a b``.

    Modified Gram-Schmidt, column by column. A column whose remaining
    norm falls below ``drop_tol`` times its original norm is dropped.
    """
    V = np.array(reps, dtype=np.float64, copy=True)
    n_cols = V.shape[1]
    C = np.eye(n_cols)
    norms0 = np.sqrt(w @ (V * V))
    keep = []
    for j in range(n_cols):
        if norms0[j] == 0.0:
            continue
        v = V[:, j]
        norm = math.sqrt(float(w @ (v * v)))
        if norm <= drop_tol * norms0[j]:
            continue
        V[:, j] /= norm
        C[:, j] /= norm
        keep.append(j)
        if j + 1 < n_cols:
            r = (w * V[:, j]) @ V[:, j + 1:]
            V[:, j + 1:] -= np.outer(V[:, j], r)
            C[:, j + 1:] -= np.outer(C[:, j], r)
    return C[:, keep]


@dataclass
class AlignmentSystem:
    """``P xi + c + alpha e ~ 0`` in the coefficients of an H-orthonormal basis."""

    P: np.ndarray
    c: np.ndarray
    e: np.ndarray
    coeffs: np.ndarray  # Phi = Gamma @ coeffs

    @property
    def rank(self) -> int:
        return self.coeffs.shape[1]

    def solve(self, alpha0: float) -> tuple[np.ndarray, float]:
        """Least squares in ``(xi, alpha)``; ``alpha`` clamped to ``alpha0``."""
        sol = lstsq(np.column_stack([self.P, self.e]), -self.c)
        xi, alpha = sol[:-1], float(sol[-1])
        if alpha < alpha0:
            alpha = alpha0
            xi = lstsq(self.P, -self.c - alpha * self.e)
        return xi, alpha


def _tangent_family(params: NetworkParams, X, W, b, basis: str):
    """Partials of the expanded output in the new block's parameters.

    Evaluated at the candidate block ``(W, b)`` with the closing update
    at zero. Returns raw values and x-derivatives (columns are
    functions), plus the block outputs ``R`` and their derivatives and
    the last features before insertion.
    """
    z, zd = features_with_dx(params, X)
    a = z @ W.T + b
    ad = zd @ W.T
    s = np.tanh(a)
    sp = 1.0 - s * s
    spp = -2.0 * s * sp
    R = z + s
    Rd = zd + sp * ad
    if basis == "xi":
        return R, Rd, R, Rd, z, zd
    zeta = params.closing
    n, d = z.shape
    # d/dW_ij = zeta_i s'(a_i) z_j, d/db_i = zeta_i s'(a_i)
    g = zeta * sp
    gd = zeta * spp * ad
    GW = (g[:, :, None] * z[:, None, :]).reshape(n, -1)
    GWd = (gd[:, :, None] * z[:, None, :] + g[:, :, None] * zd[:, None, :]).reshape(n, -1)
    vals = np.hstack([GW, g, R])
    dvals = np.hstack([GWd, gd, Rd])
    return vals, dvals, R, Rd, z, zd


def alignment_system(energy: Energy, params: NetworkParams, W: np.ndarray, b: np.ndarray,
                     drop_tol: float = 1e-10, basis: str = "full") -> AlignmentSystem:
    """Alignment least-squares data for a candidate block ``(W, b)``.

    ``params`` is the network before insertion. With ``basis="full"``
    the H-orthonormal basis spans the partials in ``W``, ``b`` and
    ``xi``; with ``basis="xi"`` only the ``xi`` partials (the new block
    outputs).
    """
    if basis not in ("full", "xi"):
        raise ValueError(f"unknown basis {basis!r}")
    X = energy.rule.nodes
    vals, dvals, R, Rd, z, zd = _tangent_family(params, X, W, b, basis)
    w = energy.rule.weights
    reps = energy.represent(params, vals, dvals)
    C = _mgs(reps, w, drop_tol)
    Phi = reps @ C
    wPhi = w[:, None] * Phi
    zeta = params.closing
    diff = energy.represent(params, (R - z) @ zeta, (Rd - zd) @ zeta)
    P = wPhi.T @ energy.represent(params, R, Rd)
    c = wPhi.T @ diff
    e = wPhi.T @ energy.gradient_representation(params)
    if hasattr(energy, "linear_term"):
        e = e - C.T @ ((energy.m[:, None] * vals).T @ (w * energy.g))
    return AlignmentSystem(P, c, e, C)


def _candidate_params(params: NetworkParams, W, b, xi) -> NetworkParams:
    new, _ = add_layer(params)
    new.blocks[-1] = BlockParams(np.array(W, dtype=float), np.array(b, dtype=float))
    new.closing = params.closing + xi
    return new


def aligned_init_new_layer(energy: Energy, params: NetworkParams, m: Optional[int] = None,
                           config: Optional[ExpansionConfig] = None,
                           rng: Optional[np.random.Generator] = None, batches=None
                           ) -> tuple[NetworkParams, Optional[AlignmentCandidate], dict]:
    """Insert a block initialized by gradient alignment over ``K`` random candidates.

    For each candidate ``(W, b)`` the closing update ``xi`` and the step
    ``alpha >= alpha0`` solve the alignment least squares (see
    :func:`alignment_system`). The lowest-energy candidate is returned
    (lowest index on ties), even when its energy exceeds that of the
    zero-weight embedding: the nonzero block is what gives the following
    NGF phase new tangent directions. Falls back to random
    initialization when every candidate is degenerate.
    """
    config = config or ExpansionConfig()
    rng = rng if rng is not None else np.random.default_rng()
    dL = params.arch.widths[-1]
    if m is not None and m != dL:
        raise ValueError(f"new width must equal the last width {dL}")
    embed, _ = add_layer(params)
    embed_loss = epoch_loss(energy, embed, batches)
    info = {"embedding_loss": embed_loss, "candidate_energies": [], "fallback": None}
    best: Optional[AlignmentCandidate] = None
    best_params = None
    for k in range(config.K):
        W = rng.uniform(-config.random_scale, config.random_scale, size=(dL, dL))
        b = rng.uniform(-config.random_scale, config.random_scale, size=dL)
        sysm = alignment_system(energy, params, W, b, config.drop_tol, config.basis)
        if sysm.rank == 0:
            info["candidate_energies"].append(None)
            continue
        xi, alpha = sysm.solve(config.alpha0)
        cand_params = _candidate_params(params, W, b, xi)
        e_after = epoch_loss(energy, cand_params, batches)
        info["candidate_energies"].append(e_after)
        if not math.isfinite(e_after):
            continue
        if best is None or e_after < best.energy_after:
            best = AlignmentCandidate(W, b, xi, alpha, e_after, sysm.rank, k)
            best_params = cand_params
    if best is None:
        logger.warning("all alignment candidates degenerate; using random initialization")
        info["fallback"] = "random"
        new = random_init_new_layer(params, None, config.random_scale, rng)
        return new, None, info
    info["selected"] = best.index
    return best_params, best, info


def _stage_loss(record: TrainRecord) -> float:
    return float(record.rows[-1]["loss"])


@dataclass
class ExpansionResult:
    params: NetworkParams
    records: list[TrainRecord]
    summary: dict
    record: TrainRecord = field(default_factory=TrainRecord)


def run_expansive_training(energy: Energy, params0: NetworkParams,
                           ngf_cfg: Optional[NgfConfig] = None,
                           adam_cfg: Optional[AdamConfig] = None,
                           exp_cfg: Optional[ExpansionConfig] = None,
                           ngf_criteria: Optional[StopCriteria] = None,
                           adam_criteria: Optional[StopCriteria] = None,
                           batches=None, rng: Optional[np.random.Generator] = None,
                           ) -> ExpansionResult:
    """Grow-and-train loop.

    1. NGF on all parameters until early termination or saturation.
    2. Repeat: insert a block; NGF on the new block and the closing
       vector; on saturation, Adam on all parameters; on Adam
       saturation, stop if the stage loss changed by at most
       ``term_abs`` (or relatively ``term_rel``), else expand again.

    ``tol_abs`` of the criteria stops the run at any point. The total
    number of epochs is capped by ``exp_cfg.max_total_iters``.
    """
    ngf_cfg = ngf_cfg or NgfConfig()
    adam_cfg = adam_cfg or AdamConfig()
    exp_cfg = exp_cfg or ExpansionConfig()
    ngf_criteria = ngf_criteria or StopCriteria()
    adam_criteria = adam_criteria or StopCriteria(
        tol_abs=ngf_criteria.tol_abs, sat_abs=1e-8, sat_rel=5e-4)
    rng = rng if rng is not None else np.random.default_rng()
    t_start = time.perf_counter()

    records: list[TrainRecord] = []
    full = TrainRecord()
    phases: list[dict] = []
    expansions: list[dict] = []
    used = 0
    params = params0.with_active(None)

    def run_phase(name, optimizer, p):
        nonlocal used
        budget = exp_cfg.max_total_iters - used
        entry = epoch_loss(energy, p, batches)
        try:
            if optimizer == "ngf":
                p, rec, flag = run_ngf(energy, p, batches, ngf_cfg, ngf_criteria,
                                       phase=name, start_epoch=used, max_epochs=budget)
            else:
                p, rec, flag = run_adam(energy, p, batches, adam_cfg, adam_criteria,
                                        phase=name, start_epoch=used, max_epochs=budget)
        except (ArithmeticError, np.linalg.LinAlgError, NumericalError) as exc:
            if not getattr(exc, "phase", None):
                exc.phase = name
            raise
        used += len(rec)
        records.append(rec)
        full.extend(rec)
        phases.append({
            "phase": name, "optimizer": optimizer,
            "active_size": int(p.active_indices.size), "iterations": len(rec),
            "entry_loss": entry, "exit_loss": epoch_loss(energy, p, batches),
            "flag": flag.value,
        })
        return p, rec, flag

    def finish(p, flag):
        full.flag = flag
        summary = {
            "flag": flag.value,
            "iterations": used,
            "expansions": len(expansions),
            "final_loss": full.rows[-1]["loss"] if full.rows else None,
            "exit_loss": epoch_loss(energy, p, batches),
            "phases": phases,
            "expansion_events": expansions,
            "widths": list(p.arch.widths),
            "wall_time": time.perf_counter() - t_start,
        }
        return ExpansionResult(p.with_active(None), records, summary, full)

    params, rec, flag = run_phase("initial_ngf", "ngf", params)
    if flag is StopFlag.EARLY_TERMINATED:
        return finish(params, flag)
    stage_loss = _stage_loss(rec)

    while True:
        if used >= exp_cfg.max_total_iters:
            return finish(params, StopFlag.MAX_ITERS)
        if len(expansions) >= exp_cfg.max_expansions:
            return finish(params, StopFlag.MAX_EXPANSIONS)
        before = epoch_loss(energy, params, batches)
        event = {"index": len(expansions) + 1, "at_iteration": used,
                 "init_method": exp_cfg.init_method, "loss_before": before}
        if exp_cfg.init_method == "random":
            params = random_init_new_layer(params.with_active(None), exp_cfg.new_width,
                                           exp_cfg.random_scale, rng)
        else:
            params, cand, info = aligned_init_new_layer(
                energy, params.with_active(None), exp_cfg.new_width, exp_cfg, rng, batches)
            event.update(selected_candidate=info.get("selected"),
                         fallback=info["fallback"],
                         alpha=None if cand is None else cand.alpha)
        event["loss_after"] = epoch_loss(energy, params, batches)
        expansions.append(event)
        if full.rows:
            full.tag_last(f"expand{event['index']}")
        n = len(expansions)

        params = params.with_active(params.last_layers_indices(1))
        params, rec, flag = run_phase(f"exp{n}_ngf", "ngf", params)
        params = params.with_active(None)
        if flag is StopFlag.EARLY_TERMINATED:
            return finish(params, flag)
        if used >= exp_cfg.max_total_iters:
            return finish(params, StopFlag.MAX_ITERS)
        full.tag_last("switch_adam")
        params, rec, flag = run_phase(f"exp{n}_adam", "adam", params)
        if flag is StopFlag.EARLY_TERMINATED:
            return finish(params, flag)
        new_stage = _stage_loss(rec)
        change = abs(new_stage - stage_loss)
        if exp_cfg.term_abs is not None and change <= exp_cfg.term_abs:
            return finish(params, StopFlag.TERMINATED)
        if (exp_cfg.term_rel is not None and stage_loss != 0.0
                and change / abs(stage_loss) <= exp_cfg.term_rel):
            return finish(params, StopFlag.TERMINATED)
        stage_loss = new_stage
