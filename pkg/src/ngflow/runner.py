"""Build problems and optimizers from a resolved config, run, write outputs."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .config import SCHEMA_VERSION, config_hash
from .expansion import ExpansionConfig, run_expansive_training
from .network import Architecture, init_params, save_checkpoint
from .optimizers import (
    AdamConfig,
    LambdaTable,
    NgfConfig,
    NumericalError,
    StopCriteria,
    StopFlag,
    TrainRecord,
    run_adam,
    run_ngf,
)
from .plotting import write_loss_svg
from .problems import (
    NewtonConvergenceError,
    exact_ritz_energy,
    make_mor_problem,
    make_ritz_problem,
    make_sl_problem,
    test_errors,
)

logger = logging.getLogger(__name__)

__all__ = [
    "RunFailure",
    "build_problem",
    "optimizer_configs",
    "run_experiment",
    "write_outputs",
]

INPUT_DIMS = {"sl": 1, "ritz": 1, "burgers_mor": 3}


class RunFailure(RuntimeError):
    """A numerical failure during a run, with the phase it happened in."""

    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"numerical failure in phase {phase!r}: {cause}")


def build_problem(cfg: dict):
    """``(energy, testset, batches)`` for the config's problem section."""
    p = cfg["problem"]
    if p["type"] == "sl":
        energy, test = make_sl_problem(p["k"], p["n_train"], p["n_test"], p["data_seed"],
                                       p["n_batches"])
    elif p["type"] == "ritz":
        energy, test = make_ritz_problem(p["k"], p["n_nodes"], p["n_test"])
    elif p["type"] == "burgers_mor":
        energy, test, _ = make_mor_problem(seed=p["data_seed"])
    else:
        raise ValueError(f"unknown problem type {p['type']!r}")
    return energy, test, energy.default_batches()


def lambda_table_from_spec(spec) -> LambdaTable:
    if isinstance(spec, str):
        return LambdaTable.named(spec)
    return LambdaTable(tuple(spec["thresholds"]), tuple(spec["values"]))


def optimizer_configs(cfg: dict):
    """``(NgfConfig, AdamConfig, ExpansionConfig, stop, adam_stop)``."""
    ngf = dict(cfg["ngf"])
    ngf["lambda_table"] = lambda_table_from_spec(ngf["lambda_table"])
    return (
        NgfConfig(**ngf),
        AdamConfig(**cfg["adam"]),
        ExpansionConfig(**cfg["expansion"]),
        StopCriteria(**cfg["stop"]),
        StopCriteria(**cfg["adam_stop"]),
    )


def _test_metrics(params, test) -> dict:
    out = {"L2": test_errors(params, test, "L2")}
    if test.kind == "ritz":
        out["H1"] = test_errors(params, test, "H1")
    return out


_NUMERICAL = (NumericalError, np.linalg.LinAlgError, FloatingPointError,
              NewtonConvergenceError, OverflowError)


def run_experiment(cfg: dict) -> tuple[object, TrainRecord, dict]:
    """Run a resolved config; returns ``(params, record, summary)``.

    Numerical failures are raised as :class:`RunFailure`.
    """
    t0 = time.perf_counter()
    phase = "setup"
    try:
        energy, test, batches = build_problem(cfg)
        arch = Architecture(INPUT_DIMS[cfg["problem"]["type"]], tuple(cfg["model"]["widths"]),
                            cfg["model"]["activation"])
        params = init_params(arch, np.random.default_rng(cfg["model"]["init_seed"]))
        ngf_cfg, adam_cfg, exp_cfg, stop, adam_stop = optimizer_configs(cfg)
        opt = cfg["optimizer"]
        phase = opt
        if opt == "expansive":
            rng = np.random.default_rng([cfg["seed"], 1])
            res = run_expansive_training(energy, params, ngf_cfg, adam_cfg, exp_cfg, stop,
                                         adam_stop, batches, rng)
            params, record = res.params, res.record
            summary = {k: res.summary[k] for k in
                       ("flag", "iterations", "expansions", "phases", "expansion_events")}
        else:
            runner = run_ngf if opt == "ngf" else run_adam
            conf = ngf_cfg if opt == "ngf" else adam_cfg
            params, record, flag = runner(energy, params, batches, conf, stop, phase=opt)
            summary = {
                "flag": flag.value, "iterations": len(record), "expansions": 0,
                "phases": [{"phase": opt, "optimizer": opt, "iterations": len(record),
                            "flag": flag.value}],
                "expansion_events": [],
            }
        phase = "evaluation"
        metrics = _test_metrics(params, test)
    except _NUMERICAL as exc:
        raise RunFailure(getattr(exc, "phase", None) or phase, exc) from exc

    out = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg["name"],
        "problem": cfg["problem"]["type"],
        "optimizer": cfg["optimizer"],
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        **summary,
        "final_loss": record.rows[-1]["loss"] if record.rows else None,
        "test_errors": metrics,
        "widths": list(params.arch.widths),
        "n_params": params.arch.n_params,
        "wall_time": time.perf_counter() - t0,
    }
    if cfg["problem"]["type"] == "ritz":
        out["reference_energy"] = exact_ritz_energy(cfg["problem"]["k"])
    out["config"] = cfg
    return params, record, out


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, StopFlag):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    # JSON has no NaN/inf
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_outputs(out_dir, params, record: TrainRecord, summary: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record.to_csv(out_dir / "record.csv")
    (out_dir / "summary.json").write_text(
        json.dumps(_clean(summary), indent=2, default=_json_default) + "\n")
    write_loss_svg(out_dir / "loss.svg", record, title=summary.get("name", ""))
    save_checkpoint(params, out_dir / "checkpoint.json")
    return out_dir


def default_out_dir(cfg: dict, out: Optional[str] = None) -> Path:
    if out is not None:
        return Path(out)
    return Path(cfg["output_dir"]) / f"{cfg['name']}_seed{cfg['seed']}"
