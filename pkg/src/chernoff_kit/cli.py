"""Command-line experiment runner.

    chernoff-kit run <config.toml | preset> [--out DIR] [--seed N] [--threads K] [--snapshots]
    chernoff-kit list-presets

Exit codes: 0 success, 2 invalid configuration, 1 numerical or I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import (BUNDLED, GENERATOR_PRESETS, PRESETS, SYMBOL_PRESETS, ConfigError,
                     ExperimentConfig, load_config, preset_text)
from .grid import GridFunction, sample
from .iterate import chernoff_iterate, convergence_study
from .stochastic import FractionalMeasure, fractional_solve

SCHEMA_VERSION = 1
RESULTS_HEADER = ["experiment", "n", "sup_error", "l2_error", "runtime_ms"]


def _solver(cfg: ExperimentConfig, F, f0: GridFunction):
    if cfg.solver == "fractional":
        mu = FractionalMeasure.delta_half()
        return lambda n: fractional_solve(F, f0, cfg.t, n, mu, cfg.quadrature_nodes)
    return lambda n: chernoff_iterate(F, cfg.t, n, f0)


def _error_mask(cfg: ExperimentConfig):
    if cfg.error_region is None:
        return None
    pts = cfg.grid.points()
    sel = np.zeros(cfg.grid.size, dtype=bool)
    for box in cfg.error_region:
        sel |= np.all((pts >= box[:, 0]) & (pts <= box[:, 1]), axis=1)
    return sel


def run_experiments(cfg: ExperimentConfig, threads: int = 1) -> list:
    """Run every configured study; returns the ConvergenceReports in config order."""
    grid = cfg.grid
    f0 = sample(grid, cfg.initial)
    mask = _error_mask(cfg)
    reports = []
    for name in cfg.experiments:
        F = cfg.families[name]
        solve = _solver(cfg, F, f0)
        if cfg.reference == "exact":
            ref = F.apply(cfg.t, f0)
            ref_name = "exact"
        elif cfg.reference == "self":
            R = cfg.families[cfg.reference_stage] if cfg.reference_stage else F
            ref = _solver(cfg, R, f0)(cfg.reference_n)
            ref_name = f"self:{R.name}@n={cfg.reference_n}"
        else:
            expr = cfg.reference_expr
            ref = sample(grid, lambda *c: expr(*c, t=cfg.t))
            ref_name = f"expression:{expr.source}"
        results, timings = {}, {}

        def cell(n):
            t0 = time.perf_counter()
            u = solve(n)
            return n, u, (time.perf_counter() - t0) * 1e3

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                done = list(pool.map(cell, cfg.ns))
        else:
            done = [cell(n) for n in cfg.ns]
        for n, u, ms in done:
            results[n], timings[n] = u, ms
        rep = convergence_study(F, cfg.t, f0, cfg.ns, ref, norm=cfg.norm,
                                reference_name=ref_name, solve=results.__getitem__, mask=mask)
        rep.runtimes_ms = [timings[n] for n in cfg.ns]
        rep.family = name
        rep.snapshots = results if cfg.snapshots else None
        reports.append(rep)
    return reports


def _write_outputs(cfg: ExperimentConfig, reports: list, out: Path, seed: int,
                   snapshots: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    formats = cfg.raw.get("output", {}).get("formats", ["csv", "json"])
    if "csv" in formats:
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULTS_HEADER)
            for rep in reports:
                for n, se, le, ms in zip(rep.ns, rep.sup_errors, rep.l2_errors, rep.runtimes_ms):
                    w.writerow([rep.family, n, repr(float(se)), repr(float(le)), f"{ms:.3f}"])
    if "json" in formats:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "library_version": __version__,
            "experiment": cfg.experiment_id,
            "config_hash": cfg.hash,
            "seed": seed,
            "grid": {"dim": cfg.grid.dim, "lower": list(cfg.grid.lower),
                     "upper": list(cfg.grid.upper), "m": cfg.grid.m},
            "solver": cfg.solver,
            "reports": [rep.to_dict() for rep in reports],
            "orders": {rep.family: rep.order for rep in reports},
        }
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        coords = cfg.grid.coords()
        names = ["x", "y"][: cfg.grid.dim]
        for rep in reports:
            for n, u in (rep.snapshots or {}).items():
                with open(snap_dir / f"{rep.family}_n{n}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(names + ["re", "im"])
                    for row in zip(*coords, u.values.real, u.values.imag):
                        w.writerow([repr(float(v)) for v in row])


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.snapshots:
        cfg.snapshots = True
    seed = cfg.seed if args.seed is None else args.seed
    out = os.environ.get("CHERNOFF_KIT_OUT") or args.out or cfg.output_dir or "chernoff_out"
    try:
        reports = run_experiments(cfg, threads=max(1, args.threads))
        _write_outputs(cfg, reports, Path(out), seed, cfg.snapshots)
    except (ValueError, TypeError, FloatingPointError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for rep in reports:
        tag = "exact" if rep.exact else (f"order {rep.order:.3f}" if rep.order is not None else "order n/a")
        print(f"{rep.family}: {tag}, final {rep.norm} error {rep.errors[-1]:.3e}")
    print(f"wrote {out}")
    return 0


def cmd_list_presets(args) -> int:
    print("experiment presets:")
    for name, desc in PRESETS.items():
        print(f"  {name:16s} {desc}")
    print("example configs:")
    for name in BUNDLED:
        print(f"  {name:16s} {preset_text(name).splitlines()[0].lstrip('# ')}")
    print("symbol presets:")
    for name, (kind, params) in SYMBOL_PRESETS.items():
        print(f"  {name:16s} {kind} {params}")
    print("generator presets:")
    for name, coeffs in GENERATOR_PRESETS.items():
        print(f"  {name:16s} {coeffs}")
    return 0


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chernoff-kit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config or bundled preset")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (CHERNOFF_KIT_OUT overrides)")
    r.add_argument("--seed", type=_u64, default=None)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--snapshots", action="store_true", help="write final iterates as CSV")
    r.set_defaults(func=cmd_run)
    ls = sub.add_parser("list-presets", help="list bundled presets")
    ls.set_defaults(func=cmd_list_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
