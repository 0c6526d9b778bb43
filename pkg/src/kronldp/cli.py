"""Batch front end: one JSON config, one command, reproducible files out.

A run is described by a single JSON document with a "command" discriminator
and a parameter block named after the command; --command, --seed, --threads
and --out override the corresponding config fields, and KRONLDP_THREADS is
the fallback when neither names a thread count. Numeric CSV cells are
written with repr-faithful 17-significant-digit formatting so re-running a
config byte-reproduces the file bodies; wall-clock metadata goes to a
separate run_meta.json that is allowed to differ between runs.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 degenerate
model.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .mde import (ConvergenceError, DomainError, density, left_edge,
                  right_edge)
from .model import StructureError, structure_from_dict, structure_hash, validate
from .montecarlo import estimate_record, simulate_lambda1, tail_probability, write_jsonl
from .outlier import largest_outlier
from .rate import DegenerateModelError, rate_function
from .verify import render_table, run_checks

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_DEGENERATE = 3

COMMANDS = ("density", "rate", "outlier", "simulate", "verify")


class ConfigError(ValueError):
    """Malformed or incomplete run configuration; exits with code 1."""


@dataclass
class RunConfig:
    structure: object
    command: str
    params: dict
    output_dir: Path
    seed: int
    thread_count: int


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _require(doc, field, kind, default=None):
    if field not in doc:
        if default is not None:
            return default
        raise ConfigError(f"config field '{field}' is missing")
    val = doc[field]
    if not isinstance(val, kind):
        raise ConfigError(f"config field '{field}' must be {kind.__name__}, "
                          f"got {type(val).__name__}")
    return val


def load_config(path, overrides) -> RunConfig:
    """Parse and validate the JSON config, applying CLI overrides."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")

    command = overrides.command or _require(doc, "command", str)
    if command not in COMMANDS:
        raise ConfigError(f"config field 'command' must be one of "
                          f"{', '.join(COMMANDS)}; got '{command}'")

    if "structure" not in doc:
        raise ConfigError("config field 'structure' is missing")
    try:
        structure = structure_from_dict(doc["structure"])
    except (StructureError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config field 'structure' is invalid: {exc}") from exc
    problems = validate(structure)
    if problems:
        raise ConfigError(f"config field 'structure' is invalid: {problems[0]}")

    seed = overrides.seed if overrides.seed is not None else _require(doc, "seed", int, 0)
    if overrides.threads is not None:
        threads = overrides.threads
    elif "threads" in doc:
        threads = _require(doc, "threads", int)
    else:
        try:
            threads = int(os.environ.get("KRONLDP_THREADS", "1"))
        except ValueError:
            raise ConfigError("KRONLDP_THREADS must be an integer") from None
    if threads < 1:
        raise ConfigError("config field 'threads' must be >= 1")

    out = Path(overrides.out or doc.get("output_dir", "."))
    params = doc.get(command, {})
    if not isinstance(params, dict):
        raise ConfigError(f"config field '{command}' must be an object")
    return RunConfig(structure=structure, command=command, params=params,
                     output_dir=out, seed=int(seed), thread_count=int(threads))


def _write_rows(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(c) if not isinstance(c, str) else c for c in row)
              for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_meta(cfg: RunConfig, started, files):
    meta = {
        "command": cfg.command,
        "seed": cfg.seed,
        "threads": cfg.thread_count,
        "structure": structure_hash(cfg.structure),
        "version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
        "files": sorted(files),
    }
    (cfg.output_dir / "run_meta.json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def _pool_map(cfg: RunConfig, fn, items):
    """Evaluate pure per-item tasks on the worker pool, preserving order."""
    if cfg.thread_count == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=cfg.thread_count) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands

def cmd_density(cfg: RunConfig) -> int:
    st = cfg.structure
    info = right_edge(st)
    lo = cfg.params.get("x_lo")
    hi = cfg.params.get("x_hi")
    if lo is None:
        lo = left_edge(st) - 0.1
    if hi is None:
        hi = info.r_inf + 0.1
    grid_size = int(cfg.params.get("grid_size", 1001))
    if st.k == 0:
        # atoms only: no continuous density to tabulate, but the edge is exact
        rows = []
    else:
        dens = density(st, lo, hi, grid_size=grid_size)
        cell = np.zeros_like(dens.density)
        h = dens.grid[1] - dens.grid[0]
        cell[1:] = (dens.density[1:] + dens.density[:-1]) * h / 2.0
        rows = list(zip(dens.grid, dens.density, cell))
    _write_rows(cfg.output_dir / "density.csv",
                ["x", "density", "cell_mass"], rows)
    support = {
        "r_inf": info.r_inf,
        "m_at_edge": info.m_at_edge,
        "detection_eta": info.detection_eta,
        "detection_threshold": info.detection_threshold,
        "left_edge": left_edge(st),
    }
    (cfg.output_dir / "support.json").write_text(
        json.dumps(support, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_rate(cfg: RunConfig) -> int:
    st = cfg.structure
    grid = cfg.params.get("x_grid")
    if not isinstance(grid, list) or not grid:
        raise ConfigError("config field 'rate.x_grid' must be a non-empty list")
    edge = right_edge(st).r_inf
    usable = []
    for x in grid:
        if float(x) <= edge:
            print(f"warning: x = {x} is not beyond the support edge "
                  f"{edge:.6f}; row skipped", file=sys.stderr)
        else:
            usable.append(float(x))
    results = _pool_map(cfg, lambda x: rate_function(st, x), usable)
    rows = [(x, r.value, r.theta_star, r.epsilon_used)
            for x, r in zip(usable, results)]
    _write_rows(cfg.output_dir / "rate.csv",
                ["x", "rate", "theta_star", "epsilon"], rows)
    return EXIT_OK


def cmd_outlier(cfg: RunConfig) -> int:
    st = cfg.structure
    grid = cfg.params.get("theta_grid")
    if not isinstance(grid, list) or not grid:
        raise ConfigError("config field 'outlier.theta_grid' must be a non-empty list")
    psi = cfg.params.get("psi")
    psi = np.eye(st.L) / st.L if psi is None else np.asarray(psi, dtype=float)
    results = _pool_map(cfg, lambda t: largest_outlier(st, float(t), psi), grid)
    rows = [(t, r.Z, r.residual) for t, r in zip(grid, results)]
    _write_rows(cfg.output_dir / "outlier.csv", ["theta", "Z", "residual"], rows)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    st = cfg.structure
    n = int(cfg.params.get("N", 100))
    reps = int(cfg.params.get("reps", 0))
    if reps <= 0:
        raise ConfigError("reps must be positive")
    if n <= 0:
        raise ConfigError("N must be positive")
    draws = simulate_lambda1(st, n, reps, cfg.seed)
    rows = [(i, lam) for i, (lam, _) in enumerate(draws)]
    _write_rows(cfg.output_dir / "simulate.csv", ["rep", "lambda1"], rows)
    x = cfg.params.get("x")
    delta = cfg.params.get("delta")
    if x is not None and delta is not None:
        est = tail_probability(st, float(x), float(delta), n, reps, cfg.seed,
                               sampler=cfg.params.get("sampler", "dense"))
        out = cfg.output_dir / "tail.jsonl"
        out.unlink(missing_ok=True)
        write_jsonl(out, [estimate_record(est, st, cfg.seed)])
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    names = cfg.params.get("checks")
    results = run_checks(names=names, emit=print)
    report = render_table(results)
    (cfg.output_dir / "verify.txt").write_text(report + "\n", encoding="utf-8")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"first failing suite: {failed[0]}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


HANDLERS = {
    "density": cmd_density,
    "rate": cmd_rate,
    "outlier": cmd_outlier,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kronldp",
        description="Rate functions and rare-event checks for Gaussian "
                    "Kronecker random matrices.")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--command", choices=COMMANDS,
                        help="override the config's command")
    parser.add_argument("--seed", type=int, help="override the config's seed")
    parser.add_argument("--threads", type=int,
                        help="override the config's thread count "
                             "(fallback: KRONLDP_THREADS)")
    parser.add_argument("--out", help="override the config's output directory")
    parser.add_argument("--version", action="version", version=__version__)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"config error: output dir not writable: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        code = HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateModelError as exc:
        print(f"degenerate model: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConvergenceError, DomainError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # bad parameter values rejected inside the library are config errors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    files = [p.name for p in cfg.output_dir.iterdir()
             if p.name not in ("run_meta.json",)]
    _write_meta(cfg, started, files)
    return code


if __name__ == "__main__":
    sys.exit(main())
