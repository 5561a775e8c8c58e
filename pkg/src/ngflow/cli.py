"""Command line entry point: ``ngflow run|suite|diag|configs``.

Exit codes: 0 clean stop, 1 a suite had failing runs, 2 invalid config
or manifest (nothing written), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, bundled_configs, find_config, load_config
from .network import load_checkpoint
from .optimizers import tangent_diagnostics
from .runner import (
    INPUT_DIMS,
    RunFailure,
    lambda_table_from_spec,
    build_problem,
    default_out_dir,
    run_experiment,
    write_outputs,
)

logger = logging.getLogger("ngflow")

EXIT_OK, EXIT_SUITE_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

TABLE_COLUMNS = ("name", "problem", "optimizer", "seed", "L0", "L", "N_ite", "N_exp",
                 "final_loss", "L2_error", "H1_error", "flag", "status", "message")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config_error(path, exc: ConfigError) -> int:
    _err(f"invalid config {path}:")
    for m in exc.messages:
        _err(f"  {m}")
    return EXIT_CONFIG


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.seed)
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except ConfigError as exc:
        return _config_error(args.config, exc)
    try:
        params, record, summary = run_experiment(cfg)
    except RunFailure as exc:
        _err(f"error: {exc}")
        return EXIT_NUMERICAL
    out = write_outputs(default_out_dir(cfg, args.out), params, record, summary)
    errs = summary["test_errors"]
    print(f"{cfg['name']}: {summary['flag']} after {summary['iterations']} iterations, "
          f"{summary['expansions']} expansions, loss {summary['final_loss']:.6g}, "
          + ", ".join(f"{k} error {v:.3g}" for k, v in errs.items())
          + f" -> {out}")
    return EXIT_OK


def _suite_entry(entry: dict, out_root: Optional[str]) -> dict:
    """One manifest entry; never raises."""
    row = {c: "" for c in TABLE_COLUMNS}
    row["name"] = str(entry.get("config", ""))
    try:
        cfg = load_config(entry["config"], entry.get("seed"))
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        row.update(status="failed", message=f"config: {exc}".replace("\n", "; "))
        return row
    row.update(name=cfg["name"], problem=cfg["problem"]["type"], optimizer=cfg["optimizer"],
               seed=cfg["seed"], L0=len(cfg["model"]["widths"]))
    try:
        params, record, summary = run_experiment(cfg)
    except RunFailure as exc:
        row.update(status="failed", message=str(exc).replace("\n", "; "))
        return row
    sub = None if out_root is None else str(Path(out_root) / f"{cfg['name']}_seed{cfg['seed']}")
    write_outputs(default_out_dir(cfg, sub), params, record, summary)
    errs = summary["test_errors"]
    row.update(
        L=len(summary["widths"]), N_ite=summary["iterations"], N_exp=summary["expansions"],
        final_loss=repr(summary["final_loss"]), L2_error=repr(errs["L2"]),
        H1_error=repr(errs["H1"]) if "H1" in errs else "", flag=summary["flag"], status="ok",
    )
    return row


def _load_manifest(path) -> tuple[list[dict], Optional[str]]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    out_dir = None
    if isinstance(doc, dict):
        out_dir = doc.get("output_dir")
        doc = doc.get("runs")
    if not isinstance(doc, list):
        raise ConfigError(["manifest must be a list of runs or an object with a 'runs' list"])
    runs = []
    for i, entry in enumerate(doc):
        if isinstance(entry, str):
            entry = {"config": entry}
        if not isinstance(entry, dict) or "config" not in entry:
            raise ConfigError([f"runs/{i}: expected a config name or an object with 'config'"])
        if "seed" in entry and not (isinstance(entry["seed"], int) and entry["seed"] >= 0):
            raise ConfigError([f"runs/{i}/seed: must be a nonnegative integer"])
        # relative config paths are taken relative to the manifest
        cand = Path(path).parent / str(entry["config"])
        if cand.exists():
            entry = {**entry, "config": str(cand)}
        runs.append(entry)
    return runs, out_dir


def cmd_suite(args) -> int:
    try:
        manifest = find_config(args.manifest)
        runs, out_dir = _load_manifest(manifest)
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except ConfigError as exc:
        return _config_error(args.manifest, exc)
    out_root = args.out or out_dir or str(Path("runs") / manifest.stem)
    if args.jobs > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_suite_entry, runs, [out_root] * len(runs)))
    else:
        rows = [_suite_entry(e, out_root) for e in runs]
    Path(out_root).mkdir(parents=True, exist_ok=True)
    table = Path(out_root) / "table.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        _err(f"failed: {r['name']}: {r['message']}")
    print(f"{len(rows) - len(failed)}/{len(rows)} runs ok -> {table}")
    return EXIT_SUITE_FAILED if failed else EXIT_OK


def cmd_diag(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except ConfigError as exc:
        return _config_error(args.config, exc)
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"cannot load checkpoint {args.checkpoint}: {exc}")
        return EXIT_CONFIG
    want = tuple(cfg["model"]["widths"])
    have = params.arch.widths
    grown = cfg["optimizer"] == "expansive" and have[: len(want)] == want
    if params.arch.input_dim != INPUT_DIMS[cfg["problem"]["type"]] or not (have == want or grown):
        _err(f"architecture mismatch: checkpoint has input_dim {params.arch.input_dim}, "
             f"widths {list(have)}; config expects widths {list(want)}")
        return EXIT_CONFIG
    energy, _, _ = build_problem(cfg)
    params = params.with_active(None)
    ev = energy.evaluate(params, None, grad=True, gram=True)
    table = lambda_table_from_spec(cfg["ngf"]["lambda_table"])
    diag = tangent_diagnostics(ev.gram, ev.grad, ev.value, alpha=args.alpha,
                               rank_tol=args.rank_tol, table=table)
    s = np.sqrt(np.clip(np.linalg.eigvalsh(ev.gram)[::-1], 0.0, None))
    out = {
        "checkpoint": str(args.checkpoint),
        "config": cfg["name"],
        "widths": list(have),
        "energy": ev.value,
        "alpha": args.alpha,
        **diag,
        "top_singular_values": s[:10].tolist(),
    }
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_configs(args) -> int:
    for name in sorted(bundled_configs()):
        print(name[:-5])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ngflow", description="Natural gradient flow experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config_pos", nargs="?", metavar="CONFIG")
    p.add_argument("-c", "--config", help="config path or bundled config name")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run a manifest of configs and tabulate")
    p.add_argument("manifest_pos", nargs="?", metavar="MANIFEST")
    p.add_argument("-m", "--manifest")
    p.add_argument("--out", default=None, help="output root (table.csv goes here)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("diag", help="tangent-space diagnostics at a checkpoint")
    p.add_argument("checkpoint_pos", nargs="?", metavar="CHECKPOINT")
    p.add_argument("config_pos", nargs="?", metavar="CONFIG")
    p.add_argument("-k", "--checkpoint")
    p.add_argument("-c", "--config")
    p.add_argument("--alpha", type=float, default=1.0, help="convexity constant in c_star")
    p.add_argument("--rank-tol", type=float, default=1e-10,
                   help="relative singular value cutoff for the tangent space")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("configs", help="list bundled configs")
    p.set_defaults(func=cmd_configs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # flags and positionals are interchangeable
    for name in ("config", "manifest", "checkpoint"):
        pos = getattr(args, name + "_pos", None)
        if hasattr(args, name) and getattr(args, name) is None:
            setattr(args, name, pos)
    missing = [n for n in ("config", "manifest", "checkpoint")
               if hasattr(args, n) and getattr(args, n) is None]
    if missing:
        parser.error(f"{args.command}: missing {', '.join(missing)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
