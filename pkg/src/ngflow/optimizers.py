"""Natural gradient flow with a regularized flow-matrix solve, and Adam.

One NGF step on a batch solves ``(G + lam I) delta = grad`` where ``G``
is the flow matrix of the active parameters, picks ``lam`` from a table
keyed on the largest diagonal entry of ``G``, and backtracks
``theta - gamma * delta`` until the Armijo condition holds.

Both optimizers run in epochs over a list of batches and record the
mean pre-update batch loss of every epoch; the stopping rules look at
that sequence.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .energy import Energy
from .linalg import FactorizationError, solve_spd_regularized, sym_eig
from .network import NetworkParams

logger = logging.getLogger(__name__)

__all__ = [
    "AdamConfig",
    "ArmijoFailure",
    "LambdaTable",
    "NgfConfig",
    "NumericalError",
    "StepResult",
    "StopCriteria",
    "StopFlag",
    "TrainRecord",
    "adam_lr_schedule",
    "armijo_search",
    "check_stopping",
    "lambda_rule",
    "ngf_step",
    "run_adam",
    "run_ngf",
    "tangent_diagnostics",
]


class NumericalError(RuntimeError):
    """Unrecoverable numerical failure during training."""


class ArmijoFailure(RuntimeError):
    def __init__(self, gamma: float, loss0: float):
        self.gamma = gamma
        self.loss0 = loss0
        super().__init__(f"no Armijo step found down to gamma={gamma:.3e}")


@dataclass(frozen=True)
class LambdaTable:
    """Piecewise-constant regularization keyed on ``max diag(G)``.

    ``values[j]`` applies on ``[thresholds[j-1], thresholds[j])``, with
    ``values[0]`` below the first threshold and ``values[-1]`` at or
    above the last one.
    """

    thresholds: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.thresholds) + 1:
            raise ValueError("need one more value than thresholds")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if any(v <= 0 for v in self.values):
            raise ValueError("lambda values must be positive")

    @classmethod
    def default(cls) -> "LambdaTable":
        return cls(
            tuple(10.0 ** (j - 1) for j in range(1, 7)),
            tuple(5.0 * 10.0 ** (j - 6) for j in range(1, 8)),
        )

    @classmethod
    def mor(cls) -> "LambdaTable":
        return cls(
            tuple(10.0 ** (j - 1) for j in range(1, 7)),
            tuple(1.0 * 10.0 ** (j - 8) for j in range(1, 8)),
        )

    @classmethod
    def named(cls, name: str) -> "LambdaTable":
        try:
            return {"default": cls.default, "mor": cls.mor}[name]()
        except KeyError:
            raise ValueError(f"unknown lambda table {name!r}") from None

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "values": list(self.values)}


def lambda_rule(G_mm: float, table: LambdaTable) -> float:
    if not G_mm >= 0:
        raise ValueError(f"max diagonal must be nonnegative, got {G_mm}")
    j = 0
    while j < len(table.thresholds) and G_mm >= table.thresholds[j]:
        j += 1
    return table.values[j]


@dataclass
class NgfConfig:
    gamma0: float = 10.0
    armijo_c: float = 2e-4
    max_halvings: int = 40
    lambda_table: LambdaTable = field(default_factory=LambdaTable.default)
    max_epochs: int = 1000
    #: drop parameters whose flow-matrix diagonal exceeds this cap (off by default)
    diag_cap: Optional[float] = None

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if self.max_halvings < 0 or self.max_epochs < 1:
            raise ValueError("max_halvings must be >= 0 and max_epochs >= 1")


@dataclass
class AdamConfig:
    tau0: float = 5e-3
    decay_rate: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 10000

    def __post_init__(self):
        if not self.tau0 > 0 or self.decay_rate < 0:
            raise ValueError("tau0 must be positive and decay_rate nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam moment parameters")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class StopCriteria:
    """Early termination on ``|E_k| <= tol_abs`` and saturation tests.

    A tolerance set to ``None`` disables that test.
    """

    tol_abs: Optional[float] = None
    sat_abs: Optional[float] = 1e-7
    sat_rel: Optional[float] = 5e-3
    lookback: int = 5

    def __post_init__(self):
        for name in ("tol_abs", "sat_abs", "sat_rel"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")


class StopFlag(str, Enum):
    EARLY_TERMINATED = "early_terminated"
    SATURATED = "saturated"
    MAX_ITERS = "max_iters"
    MAX_EXPANSIONS = "max_expansions"
    TERMINATED = "terminated"


RECORD_COLUMNS = ("epoch", "loss", "gamma", "lambda", "phase", "event")


@dataclass
class TrainRecord:
    """Per-epoch history of one optimizer phase (or several, concatenated)."""

    rows: list[dict] = field(default_factory=list)
    batch_losses: list[list[float]] = field(default_factory=list)
    flag: Optional[StopFlag] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, epoch, loss, gamma=math.nan, lam=math.nan, phase="", event=""):
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at epoch {epoch} ({phase})")
        self.rows.append({
            "epoch": int(epoch), "loss": float(loss), "gamma": float(gamma),
            "lambda": float(lam), "phase": phase, "event": event,
        })

    def tag_last(self, event: str) -> None:
        row = self.rows[-1]
        row["event"] = f"{row['event']};{event}" if row["event"] else event

    def extend(self, other: "TrainRecord") -> None:
        self.rows.extend(dict(r) for r in other.rows)
        self.batch_losses.extend(other.batch_losses)
        self.flag = other.flag

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({**r, "loss": repr(r["loss"]), "gamma": repr(r["gamma"]),
                                 "lambda": repr(r["lambda"])})

    @classmethod
    def from_csv(cls, path) -> "TrainRecord":
        rec = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rec.rows.append({
                    "epoch": int(r["epoch"]), "loss": float(r["loss"]),
                    "gamma": float(r["gamma"]), "lambda": float(r["lambda"]),
                    "phase": r["phase"], "event": r["event"],
                })
        return rec

    def summary(self) -> dict:
        return {
            "final_loss": self.rows[-1]["loss"] if self.rows else None,
            "iterations": len(self.rows),
            "flag": None if self.flag is None else self.flag.value,
        }


def check_stopping(losses: Sequence[float], criteria: StopCriteria,
                   mode: str = "both") -> Optional[StopFlag]:
    """Stopping decision after the last entry of ``losses``.

    ``mode`` is one of ``"abs_tol"``, ``"saturation"`` or ``"both"``.
    Saturation compares ``E_k`` with ``E_{k-lookback}`` and is inactive
    until more than ``lookback`` epochs have been recorded.
    """
    if mode not in ("abs_tol", "saturation", "both"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(losses) == 0:
        raise ValueError("need at least one recorded loss")
    Ek = float(losses[-1])
    if mode != "saturation" and criteria.tol_abs is not None and abs(Ek) <= criteria.tol_abs:
        return StopFlag.EARLY_TERMINATED
    if mode != "abs_tol" and len(losses) > criteria.lookback:
        Eh = float(losses[-1 - criteria.lookback])
        diff = abs(Ek - Eh)
        if criteria.sat_abs is not None and diff < criteria.sat_abs:
            return StopFlag.SATURATED
        if criteria.sat_rel is not None and Eh != 0.0 and diff / abs(Eh) < criteria.sat_rel:
            return StopFlag.SATURATED
    return None


def armijo_search(energy: Energy, params: NetworkParams, delta: np.ndarray, gamma0: float,
                  c: float, max_halvings: int, batch=None, loss0: Optional[float] = None
                  ) -> tuple[float, float, NetworkParams]:
    """Backtrack ``theta - gamma*delta`` over the active parameters.

    Accepts the first ``gamma`` in ``gamma0, gamma0/2, ...`` with
    ``E(theta - gamma*delta) <= E(theta) - c*gamma*||delta||^2``.
    Returns ``(gamma, new_loss, new_params)``.

    Raises
    ------
    ArmijoFailure
        When all ``max_halvings + 1`` trial steps are rejected.
    """
    delta = np.asarray(delta, dtype=np.float64)
    idx = params.active_indices
    if delta.shape != idx.shape:
        raise ValueError("delta must have one entry per active parameter")
    if not np.all(np.isfinite(delta)):
        raise NumericalError("non-finite search direction")
    if loss0 is None:
        loss0 = energy.value(params, batch)
    theta = params.flatten()
    dd = float(delta @ delta)
    gamma = float(gamma0)
    for _ in range(max_halvings + 1):
        trial_theta = theta.copy()
        trial_theta[idx] -= gamma * delta
        trial = params.with_flat(trial_theta)
        loss = energy.value(trial, batch)
        if loss <= loss0 - c * gamma * dd:
            return gamma, loss, trial
        gamma *= 0.5
    raise ArmijoFailure(gamma * 2.0, loss0)


@dataclass
class StepResult:
    params: NetworkParams
    gamma: float
    lam: float
    loss_before: float
    loss_after: float
    slope: float  # grad . delta, positive for a descent direction
    bumped: bool = False


def _solve_with_retry(G, lam, grad) -> tuple[np.ndarray, float, bool]:
    try:
        return solve_spd_regularized(G, lam, grad), lam, False
    except FactorizationError as exc:
        logger.warning("%s; retrying with lambda=%g", exc, 2 * lam)
        try:
            return solve_spd_regularized(G, 2 * lam, grad), 2 * lam, True
        except FactorizationError as exc2:
            raise NumericalError(str(exc2)) from exc2


def ngf_step(energy: Energy, params: NetworkParams, batch=None,
             config: Optional[NgfConfig] = None, active_set=None) -> StepResult:
    """One regularized natural-gradient step with Armijo backtracking."""
    config = config or NgfConfig()
    if active_set is not None:
        params = params.with_active(active_set)
    if params.active_indices.size == 0:
        raise ValueError("active set is empty")
    ev = energy.evaluate(params, batch, grad=True, gram=True)
    G, grad = ev.gram, ev.grad
    diag = np.diag(G)
    lam = lambda_rule(float(diag.max()), config.lambda_table)
    if config.diag_cap is not None:
        keep = diag <= config.diag_cap
        delta = np.zeros_like(grad)
        if np.any(keep):
            sub, lam, bumped = _solve_with_retry(G[np.ix_(keep, keep)], lam, grad[keep])
            delta[keep] = sub
        else:
            bumped = False
    else:
        delta, lam, bumped = _solve_with_retry(G, lam, grad)
    slope = float(grad @ delta)
    gamma, loss, new = armijo_search(
        energy, params, delta, config.gamma0, config.armijo_c, config.max_halvings,
        batch=batch, loss0=ev.value,
    )
    return StepResult(new, gamma, lam, ev.value, loss, slope, bumped)


def _batches(energy: Energy, batches) -> list:
    batches = energy.default_batches() if batches is None else list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    return batches


def epoch_loss(energy: Energy, params: NetworkParams, batches=None) -> float:
    """Mean of the batch energies, the quantity recorded per epoch."""
    batches = _batches(energy, batches)
    return float(np.mean([energy.value(params, b) for b in batches]))


def run_ngf(energy: Energy, params: NetworkParams, batches=None,
            config: Optional[NgfConfig] = None, criteria: Optional[StopCriteria] = None,
            *, phase: str = "ngf", start_epoch: int = 0, max_epochs: Optional[int] = None,
            callback=None) -> tuple[NetworkParams, TrainRecord, StopFlag]:
    """Epoch loop of NGF steps over ``batches`` until a stopping rule fires.

    An Armijo failure ends the phase as saturated and is tagged in the
    record. ``max_epochs`` overrides the config cap (used to respect a
    global iteration budget).
    """
    config = config or NgfConfig()
    criteria = criteria or StopCriteria()
    batches = _batches(energy, batches)
    cap = config.max_epochs if max_epochs is None else min(max_epochs, config.max_epochs)
    record = TrainRecord()
    losses: list[float] = []
    flag = StopFlag.MAX_ITERS
    for k in range(1, cap + 1):
        batch_losses, gamma, lam, events = [], math.nan, math.nan, []
        failed = False
        for b in batches:
            try:
                res = ngf_step(energy, params, b, config)
            except ArmijoFailure as exc:
                batch_losses.append(exc.loss0)
                events.append("armijo_fail")
                failed = True
                break
            params = res.params
            batch_losses.append(res.loss_before)
            gamma, lam = res.gamma, res.lam
            if res.bumped:
                events.append("lambda_bump")
        if failed and len(batch_losses) < len(batches):
            # finish the epoch average with the untouched remaining batches
            batch_losses.extend(energy.value(params, b) for b in batches[len(batch_losses):])
        Ek = float(np.mean(batch_losses))
        losses.append(Ek)
        record.batch_losses.append(batch_losses)
        record.append(start_epoch + k, Ek, gamma, lam, phase, ";".join(events))
        if callback is not None:
            callback(k, Ek, params)
        if failed:
            flag = StopFlag.SATURATED
            break
        stop = check_stopping(losses, criteria)
        if stop is not None:
            flag = stop
            break
    record.flag = flag
    return params, record, flag


def adam_lr_schedule(tau0: float, decay_rate: float, n: int) -> np.ndarray:
    """``tau_i = tau_{i-1} / (1 + decay_rate * i)`` for ``i = 0..n-1``."""
    taus = np.empty(n)
    tau = tau0
    for i in range(n):
        if i > 0:
            tau = tau / (1.0 + decay_rate * i)
        taus[i] = tau
    return taus


def run_adam(energy: Energy, params: NetworkParams, batches=None,
             config: Optional[AdamConfig] = None, criteria: Optional[StopCriteria] = None,
             *, phase: str = "adam", start_epoch: int = 0, max_epochs: Optional[int] = None,
             callback=None) -> tuple[NetworkParams, TrainRecord, StopFlag]:
    """Adam over the active parameters with a decaying learning rate.

    The learning-rate index advances once per epoch; every batch in an
    epoch uses the same rate.
    """
    config = config or AdamConfig()
    criteria = criteria or StopCriteria(sat_abs=1e-8, sat_rel=5e-4)
    batches = _batches(energy, batches)
    cap = config.max_iters if max_epochs is None else min(max_epochs, config.max_iters)
    idx = params.active_indices
    if idx.size == 0:
        raise ValueError("active set is empty")
    theta = params.flatten()
    m = np.zeros(idx.size)
    v = np.zeros(idx.size)
    t = 0
    tau = config.tau0
    record = TrainRecord()
    losses: list[float] = []
    flag = StopFlag.MAX_ITERS
    for k in range(1, cap + 1):
        if k > 1:
            tau = tau / (1.0 + config.decay_rate * (k - 1))
        batch_losses = []
        for b in batches:
            ev = energy.evaluate(params, b, grad=True)
            g = ev.grad
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient at epoch {start_epoch + k} ({phase})")
            batch_losses.append(ev.value)
            t += 1
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            mhat = m / (1 - config.beta1 ** t)
            vhat = v / (1 - config.beta2 ** t)
            theta[idx] -= tau * mhat / (np.sqrt(vhat) + config.eps)
            params = params.with_flat(theta)
        Ek = float(np.mean(batch_losses))
        losses.append(Ek)
        record.batch_losses.append(batch_losses)
        record.append(start_epoch + k, Ek, tau, math.nan, phase, "")
        if callback is not None:
            callback(k, Ek, params)
        stop = check_stopping(losses, criteria)
        if stop is not None:
            flag = stop
            break
    record.flag = flag
    return params, record, flag


def tangent_diagnostics(G, grad_theta, energy_value: float, alpha: float = 1.0,
                        rank_tol: float = 1e-10, lam: Optional[float] = None,
                        table: Optional[LambdaTable] = None) -> dict:
    """Spectral summary of the flow matrix and the projected gradient.

    With ``G = V S^2 V^T`` and modes ``s_i > rank_tol * s_max`` kept,
    ``proj_norm = ||S^-1 V^T grad||`` is the norm of the projection of
    the ambient gradient onto the tangent space, ``c_star`` is
    ``proj_norm / sqrt(2 alpha E)`` and ``c5 = min s^2 / (lam^2 + s^2)``.
    ``lam`` defaults to the table value for the largest diagonal entry.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    grad_theta = np.asarray(grad_theta, dtype=np.float64)
    dec = sym_eig(G)
    s = dec.singular_values
    if lam is None:
        lam = lambda_rule(max(float(np.max(np.diag(G), initial=0.0)), 0.0),
                          table or LambdaTable.default())
    out = {
        "dim": int(s.size),
        "rank": 0,
        "s_max": float(s[0]) if s.size else 0.0,
        "s_min_pos": None,
        "lambda": float(lam),
        "proj_norm": 0.0,
        "c_star": None,
        "c5": None,
        "negative_eigenvalues": int(dec.negative_eigenvalues.size),
    }
    if s.size and s[0] > 0:
        keep = s > rank_tol * s[0]
        sk = s[keep]
        coeffs = (dec.eigenvectors[:, keep].T @ grad_theta) / sk
        out.update(
            rank=int(keep.sum()),
            s_min_pos=float(sk[-1]),
            proj_norm=float(np.linalg.norm(coeffs)),
            c5=float(np.min(sk**2 / (lam**2 + sk**2))),
        )
    if energy_value > 0:
        out["c_star"] = out["proj_norm"] / math.sqrt(2.0 * alpha * energy_value)
    elif energy_value == 0 and out["proj_norm"] == 0:
        out["c_star"] = 0.0
    return out


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    if isinstance(cfg, NgfConfig):
        d["lambda_table"] = cfg.lambda_table.to_dict()
    return d
