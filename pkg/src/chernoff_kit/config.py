"""Experiment configuration: TOML parsing, validation and pipeline construction.

A config has four blocks.  ``[grid]`` fixes the box; ``[problem]`` holds the
initial function and an ordered array ``[[problem.stages]]`` of named
stages, each building one family (possibly from earlier stages);
``[run]`` picks the studied stages, times, ``n`` values and reference;
``[output]`` sets the destination.  Every field is checked before any
computation and errors carry the config line they refer to.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import combinators as cb
from . import families as fam
from .expressions import ExpressionError, parse_expression
from .grid import Grid

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_hash",
    "PRESETS",
    "GENERATOR_PRESETS",
    "SYMBOL_PRESETS",
    "preset_text",
    "build_pipeline",
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        self.line = line
        self.field_name = field_name
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


GENERATOR_PRESETS = {
    "heat": {"A": 0.5},
    "variable": {"A": "0.5*(1 + 0.3*sin(x))", "B": "0.2*cos(x)", "C": "0.1*(1 + cos(x)^2)"},
}

SYMBOL_PRESETS = {
    "heat": ("quadratic", {"A": 0.5}),
    "cauchy": ("fractional", {"alpha": 1.0}),
    "relativistic": ("relativistic", {"alpha": 2.0, "mass": 1.0}),
}

PRESETS = {
    "heat": "exact heat semigroup (symbol p^2/2) against itself",
    "cauchy": "heat family subordinated by the 1/2-stable law against the Cauchy symbol |p|",
    "relativistic": "relativistic symbol (p^2 + 1)^(1/2) iterated against its exact semigroup",
    "killed_interval": "heat kernel restricted to (0, 1) against the first Dirichlet mode",
    "caputo_half": "Caputo order-1/2 problem through the inverse-stable time change",
}

BUNDLED = ("heat_1d", "strang_vs_lie")


def preset_text(name: str) -> str:
    if name not in PRESETS and name not in BUNDLED:
        raise KeyError(name)
    return resources.files("chernoff_kit").joinpath("configs", f"{name}.toml").read_text()


# ---------------------------------------------------------------------------
# line lookup

_HEADER = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-\"' ]+?)\s*\]\]?")


class _Lines:
    """Maps ``(table, index, key)`` to line numbers in the TOML source."""

    def __init__(self, text: str | None):
        self.headers: dict = {}
        self.keys: dict = {}
        if text is None:
            return
        counts: dict = {}
        current = ("", None)
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0]
            m = _HEADER.match(line)
            if m:
                name = m.group(2).strip()
                if m.group(1) == "[[":
                    idx = counts.get(name, 0)
                    counts[name] = idx + 1
                    current = (name, idx)
                else:
                    current = (name, None)
                self.headers.setdefault(current, no)
                continue
            km = re.match(r"^\s*([A-Za-z0-9_\-]+)\s*=", line)
            if km:
                self.keys.setdefault((current, km.group(1)), no)

    def line(self, table: str, key: str | None = None, index: int | None = None):
        cur = (table, index)
        if key is not None and (cur, key) in self.keys:
            return self.keys[(cur, key)]
        return self.headers.get(cur)


# ---------------------------------------------------------------------------
# typed config

@dataclass
class Stage:
    name: str
    op: str
    params: dict
    index: int


@dataclass
class ExperimentConfig:
    raw: dict
    experiment_id: str
    grid: Grid
    initial: object
    stages: list
    t: float
    ns: list
    norm: str
    experiments: list
    reference: str
    reference_n: int
    reference_stage: str | None
    reference_expr: object
    solver: str
    quadrature_nodes: int
    error_region: list | None
    output_dir: str | None
    snapshots: bool
    seed: int
    lines: _Lines = field(repr=False, default=None)
    families: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


class _Checker:
    def __init__(self, lines: _Lines):
        self.lines = lines

    def fail(self, msg, table, key=None, index=None):
        name = f"{table}.{key}" if key else table
        raise ConfigError(f"{name}: {msg}", self.lines.line(table, key, index), name)

    def number(self, d, table, key, default=None, lo=None, hi=None, index=None,
               integer=False, open_lo=False):
        if key not in d:
            if default is None:
                self.fail("missing required field", table, key, index)
            return default
        v = d[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"expected a number, got {v!r}", table, key, index)
        if integer and (not isinstance(v, int)):
            self.fail(f"expected an integer, got {v!r}", table, key, index)
        if not math.isfinite(v):
            self.fail("must be finite", table, key, index)
        if lo is not None and (v < lo or (open_lo and v == lo)):
            bound = ">" if open_lo else ">="
            self.fail(f"must be {bound} {lo}, got {v}", table, key, index)
        if hi is not None and v > hi:
            self.fail(f"must be <= {hi}, got {v}", table, key, index)
        return v

    def choice(self, d, table, key, options, default=None, index=None):
        v = d.get(key, default)
        if v is None:
            self.fail("missing required field", table, key, index)
        if not isinstance(v, str) or v not in options:
            self.fail(f"must be one of {sorted(options)}, got {v!r}", table, key, index)
        return v

    def expr(self, d, table, key, variables, default=None, index=None, allow_time=False):
        v = d.get(key, default)
        if v is None:
            self.fail("missing required field", table, key, index)
        try:
            return parse_expression(v, variables, allow_time=allow_time)
        except ExpressionError as exc:
            self.fail(str(exc), table, key, index)

    def bounds(self, d, table, key, dim):
        if key not in d:
            self.fail("missing required field", table, key)
        v = d[key]
        vals = v if isinstance(v, list) else [v] * dim
        if len(vals) != dim:
            self.fail(f"expected {dim} values", table, key)
        out = []
        for item in vals:
            try:
                out.append(float(parse_expression(item, ())()))
            except ExpressionError as exc:
                self.fail(str(exc), table, key)
        return out


_STAGE_OPS = {
    "symbol", "gaussian", "composite", "poisson", "potential", "shift", "averaging",
    "compose", "theta_splitting", "convex_splitting", "multiplicative", "dirichlet",
    "rotate", "subordinate_density", "subordinate_measure", "matrix_euler",
    "matrix_resolvent",
}

_REFS = {
    "compose": ("families",),
    "theta_splitting": ("F1", "F2"),
    "convex_splitting": ("F1", "F2"),
    "multiplicative": ("F",),
    "dirichlet": ("F",),
    "rotate": ("F",),
    "subordinate_density": ("F",),
    "subordinate_measure": ("F",),
}


_SYMBOL_KEYS = {"symbol", "A", "B", "C", "alpha", "mass", "scale"}
_GENERATOR_KEYS = {"generator", "A", "B", "C"}
_STAGE_KEYS = {
    "symbol": _SYMBOL_KEYS,
    "gaussian": _GENERATOR_KEYS,
    "composite": _SYMBOL_KEYS | _GENERATOR_KEYS,
    "poisson": {"a"},
    "potential": {"V"},
    "shift": {"interpolation"},
    "averaging": {"interpolation", "atoms", "weights"},
    "compose": {"families"},
    "theta_splitting": {"F1", "F2", "theta"},
    "convex_splitting": {"F1", "F2", "tau"},
    "multiplicative": {"F", "a"},
    "dirichlet": {"F", "boxes", "cutoff"},
    "rotate": {"F", "mode"},
    "subordinate_density": {"F", "sigma", "lam", "nodes"},
    "subordinate_measure": {"F", "sigma", "lam", "atoms", "weights"},
    "matrix_euler": {"diffusion"},
    "matrix_resolvent": {"diffusion"},
}
_TABLE_KEYS = {
    "experiment": {"id", "description"},
    "grid": {"dim", "lower", "upper", "m"},
    "problem": {"initial", "stages"},
    "run": {"t", "ns", "norm", "experiments", "reference", "reference_n", "reference_stage",
            "reference_expr", "solver", "measure", "quadrature_nodes", "error_region", "seed"},
    "output": {"dir", "snapshots", "formats"},
}


def _reject_unknown(ck: _Checker, d: dict, table: str, allowed: set, index=None):
    for key in d:
        if key not in allowed:
            ck.fail(f"unknown key (expected one of {sorted(allowed)})", table, key, index)


def _check_stage(ck: _Checker, st: dict, i: int, known: list, dim: int) -> Stage:
    table = "problem.stages"
    if not isinstance(st, dict):
        ck.fail("each stage must be a table", table, None, i)
    name = st.get("name")
    if not isinstance(name, str) or not name:
        ck.fail("stage needs a nonempty string name", table, "name", i)
    if name in known:
        ck.fail(f"duplicate stage name {name!r}", table, "name", i)
    op = ck.choice(st, table, "op", _STAGE_OPS, index=i)
    _reject_unknown(ck, st, table, _STAGE_KEYS[op] | {"name", "op"}, i)
    var = ("x",) if dim == 1 else ("x", "y")
    p: dict = {}
    for key in _REFS.get(op, ()):
        refs = st.get(key)
        if key == "families":
            if not isinstance(refs, list) or not refs:
                ck.fail("expected a nonempty list of stage names", table, key, i)
        else:
            refs = [refs]
        for r in refs:
            if r not in known:
                ck.fail(f"unknown stage {r!r} (stages must be defined before use)", table, key, i)
        p[key] = st[key]
    if op in ("symbol", "composite"):
        key = "symbol"
        sym = st.get(key, "heat")
        kinds = set(SYMBOL_PRESETS) | {"quadratic", "fractional", "relativistic"}
        if sym not in kinds:
            ck.fail(f"must be one of {sorted(kinds)}, got {sym!r}", table, key, i)
        kind, defaults = SYMBOL_PRESETS.get(sym, (sym, {}))
        args = dict(defaults)
        for k in ("A", "B", "C", "alpha", "mass", "scale"):
            if k in st:
                args[k] = st[k]
        if kind == "quadratic":
            p["symbol"] = ("quadratic", {
                "A": ck.number(args, table, "A", 1.0, lo=0.0, index=i),
                "B": ck.number(args, table, "B", 0.0, index=i),
                "C": ck.number(args, table, "C", 0.0, lo=0.0, index=i)})
        elif kind == "fractional":
            p["symbol"] = ("fractional", {
                "alpha": ck.number(args, table, "alpha", lo=0.0, hi=2.0, open_lo=True, index=i),
                "scale": ck.number(args, table, "scale", 1.0, lo=0.0, index=i)})
        else:
            p["symbol"] = ("relativistic", {
                "alpha": ck.number(args, table, "alpha", lo=0.0, hi=2.0, open_lo=True, index=i),
                "mass": ck.number(args, table, "mass", lo=0.0, open_lo=True, index=i),
                "scale": ck.number(args, table, "scale", 1.0, lo=0.0, index=i)})
    if op in ("gaussian", "composite"):
        gen = st.get("generator")
        coeffs = {}
        if gen is not None:
            if gen not in GENERATOR_PRESETS:
                ck.fail(f"unknown generator preset {gen!r}", table, "generator", i)
            coeffs.update(GENERATOR_PRESETS[gen])
        for k in ("A", "B", "C"):
            if k in st:
                coeffs[k] = st[k]
        if "A" not in coeffs:
            ck.fail("needs a generator preset or a diffusion coefficient A", table, None, i)
        p["A"] = ck.expr(coeffs, table, "A", var, index=i)
        p["B"] = ck.expr(coeffs, table, "B", var, 0.0, index=i)
        p["C"] = ck.expr(coeffs, table, "C", var, 0.0, index=i)
        if dim == 2 and "B" in coeffs and not isinstance(coeffs["B"], (int, float)):
            ck.fail("2D drift from configs must be a constant", table, "B", i)
    if op == "poisson":
        p["a"] = ck.expr(st, table, "a", var, 1.0, index=i)
    if op == "potential":
        p["V"] = ck.expr(st, table, "V", var, index=i)
    if op == "multiplicative":
        p["a"] = ck.expr(st, table, "a", var, index=i)
    if op in ("shift", "averaging"):
        p["interpolation"] = ck.choice(st, table, "interpolation", {"linear", "spectral"},
                                       "linear", index=i)
        if op == "shift" and dim != 1:
            ck.fail("shift stages are one-dimensional; use averaging", table, "op", i)
    if op == "averaging":
        atoms, weights = st.get("atoms"), st.get("weights")
        if not isinstance(atoms, list) or not isinstance(weights, list) or len(atoms) != len(weights):
            ck.fail("atoms and weights must be lists of equal length", table, "atoms", i)
        try:
            p["atoms"] = np.asarray(atoms, dtype=float).reshape(len(weights), dim)
            p["weights"] = np.asarray(weights, dtype=float)
        except (TypeError, ValueError):
            ck.fail("atoms must be numeric points of the grid dimension", table, "atoms", i)
    if op == "theta_splitting":
        p["theta"] = ck.number(st, table, "theta", lo=0.0, hi=1.0, index=i)
    if op == "convex_splitting":
        p["tau"] = ck.number(st, table, "tau", lo=0.0, hi=1.0, index=i)
    if op == "dirichlet":
        boxes = st.get("boxes")
        if not isinstance(boxes, list) or not boxes:
            ck.fail("expected a nonempty list of boxes", table, "boxes", i)
        try:
            p["boxes"] = [np.asarray(b, dtype=float).reshape(dim, 2) for b in boxes]
        except (TypeError, ValueError):
            ck.fail(f"each box must hold {dim} (lo, hi) pairs", table, "boxes", i)
        p["cutoff"] = ck.choice(st, table, "cutoff", {"sharp", "shifted"}, "sharp", index=i)
    if op == "rotate":
        p["mode"] = ck.choice(st, table, "mode", {"symbol", "series"}, "symbol", index=i)
    if op in ("subordinate_density", "subordinate_measure"):
        p["sigma"] = ck.number(st, table, "sigma", 0.0, lo=0.0, index=i)
        p["lam"] = ck.number(st, table, "lam", 0.0, lo=0.0, index=i)
    if op == "subordinate_density":
        p["nodes"] = ck.number(st, table, "nodes", 64, lo=2, integer=True, index=i)
    if op == "subordinate_measure":
        atoms, weights = st.get("atoms", []), st.get("weights", [])
        if not isinstance(atoms, list) or not isinstance(weights, list) or len(atoms) != len(weights):
            ck.fail("atoms and weights must be lists of equal length", table, "atoms", i)
        for a in atoms:
            if isinstance(a, bool) or not isinstance(a, (int, float)) or a <= 0:
                ck.fail(f"atoms must be positive numbers, got {a!r}", table, "atoms", i)
        for w in weights:
            if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
                ck.fail(f"weights must be nonnegative numbers, got {w!r}", table, "weights", i)
        if not atoms and p["sigma"] == 0 and p["lam"] == 0:
            ck.fail("null generator: no atoms and sigma = lam = 0", table, "atoms", i)
        p["atoms"], p["weights"] = tuple(atoms), tuple(weights)
    if op in ("matrix_euler", "matrix_resolvent"):
        p["diffusion"] = ck.number(st, table, "diffusion", 0.5, index=i)
    return Stage(name, op, p, i)


def parse_config(raw: dict, text: str | None = None, stem: str = "experiment") -> ExperimentConfig:
    """Validate a parsed TOML mapping; ``text`` (the source) enables line numbers."""
    lines = _Lines(text)
    ck = _Checker(lines)
    for block in ("grid", "problem", "run"):
        if not isinstance(raw.get(block), dict):
            raise ConfigError(f"missing [{block}] table", None, block)
    known_blocks = {"experiment", "grid", "problem", "run", "output"}
    for block in raw:
        if block not in known_blocks:
            ck.fail(f"unknown table (expected one of {sorted(known_blocks)})", block)
        if not isinstance(raw[block], dict):
            ck.fail("must be a table", block)
        _reject_unknown(ck, raw[block], block, _TABLE_KEYS[block])
    exp = raw.get("experiment", {})
    g = raw["grid"]
    dim = int(ck.number(g, "grid", "dim", 1, lo=1, hi=2, integer=True))
    lower = ck.bounds(g, "grid", "lower", dim)
    upper = ck.bounds(g, "grid", "upper", dim)
    m = ck.number(g, "grid", "m", lo=8, integer=True)
    if m & (m - 1):
        ck.fail(f"must be a power of two, got {m}", "grid", "m")
    if any(b <= a for a, b in zip(lower, upper)):
        ck.fail("upper bounds must exceed lower bounds", "grid", "upper")
    grid = Grid(lower, upper, m, dim)
    var = ("x",) if dim == 1 else ("x", "y")

    prob = raw["problem"]
    initial = ck.expr(prob, "problem", "initial", var)
    stages_raw = prob.get("stages")
    if not isinstance(stages_raw, list) or not stages_raw:
        ck.fail("needs at least one [[problem.stages]] entry", "problem")
    stages, known = [], []
    for i, st in enumerate(stages_raw):
        stage = _check_stage(ck, st, i, known, dim)
        stages.append(stage)
        known.append(stage.name)

    run = raw["run"]
    t = ck.number(run, "run", "t", lo=0.0, open_lo=True)
    ns = run.get("ns")
    if not isinstance(ns, list) or not ns:
        ck.fail("expected a nonempty list of positive integers", "run", "ns")
    for n in ns:
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            ck.fail(f"entries must be positive integers, got {n!r}", "run", "ns")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        ck.fail("must be strictly increasing", "run", "ns")
    norm = ck.choice(run, "run", "norm", {"sup", "l2"}, "sup")
    experiments = run.get("experiments", [known[-1]])
    if isinstance(experiments, str):
        experiments = [experiments]
    if not isinstance(experiments, list) or not experiments:
        ck.fail("expected a nonempty list of stage names", "run", "experiments")
    for e in experiments:
        if e not in known:
            ck.fail(f"unknown stage {e!r}", "run", "experiments")
    reference = ck.choice(run, "run", "reference", {"exact", "self", "expression"})
    reference_n = int(ck.number(run, "run", "reference_n", 4096, lo=1, integer=True))
    reference_stage = run.get("reference_stage")
    if reference_stage is not None and reference_stage not in known:
        ck.fail(f"unknown stage {reference_stage!r}", "run", "reference_stage")
    reference_expr = None
    if reference == "expression":
        reference_expr = ck.expr(run, "run", "reference_expr", var, allow_time=True)
    solver = ck.choice(run, "run", "solver", {"chernoff", "fractional"}, "chernoff")
    if solver == "fractional":
        ck.choice(run, "run", "measure", {"delta_half"}, "delta_half")
    nodes = int(ck.number(run, "run", "quadrature_nodes", 48, lo=2, integer=True))
    region = run.get("error_region")
    if region is not None:
        try:
            region = [np.asarray(b, dtype=float).reshape(dim, 2) for b in region]
        except (TypeError, ValueError):
            ck.fail(f"each region box must hold {dim} (lo, hi) pairs", "run", "error_region")
    seed = run.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        ck.fail("seed must be an integer in [0, 2^64)", "run", "seed")

    out = raw.get("output", {})
    out_dir = out.get("dir")
    if out_dir is not None and not isinstance(out_dir, str):
        ck.fail("must be a string path", "output", "dir")
    snaps = out.get("snapshots", False)
    if not isinstance(snaps, bool):
        ck.fail("must be true or false", "output", "snapshots")
    formats = out.get("formats", ["csv", "json"])
    if not isinstance(formats, list) or not set(formats) <= {"csv", "json"}:
        ck.fail("formats must be a list drawn from ['csv', 'json']", "output", "formats")

    cfg = ExperimentConfig(
        raw=raw, experiment_id=str(exp.get("id", stem)), grid=grid, initial=initial,
        stages=stages, t=float(t), ns=list(ns), norm=norm, experiments=list(experiments),
        reference=reference, reference_n=reference_n, reference_stage=reference_stage,
        reference_expr=reference_expr, solver=solver, quadrature_nodes=nodes,
        error_region=region, output_dir=out_dir, snapshots=snaps, seed=int(seed), lines=lines)
    families = build_pipeline(cfg)
    cfg.families = families
    for name in experiments:
        F = families[name]
        if reference == "exact" and not F.exact:
            ck.fail(f"stage {name!r} is not an exact semigroup; use 'self' or 'expression'",
                    "run", "reference")
    return cfg


def load_config(source: str):
    """Read a config from a path, or from a bundled preset name."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
        stem = path.stem
    else:
        try:
            text = preset_text(source)
        except KeyError:
            raise ConfigError(f"no config file or preset named {source!r}") from None
        stem = source
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", int(m.group(1)) if m else None) from None
    return parse_config(raw, text, stem)


def _symbol(spec) -> fam.SymbolSpec:
    kind, args = spec
    if kind == "quadratic":
        return fam.SymbolSpec.quadratic(args["A"], args["B"], args["C"])
    if kind == "fractional":
        return fam.SymbolSpec.fractional(args["alpha"], args["scale"])
    return fam.SymbolSpec.relativistic(args["alpha"], args["mass"], args["scale"])


def _quadratic_for_dim(spec, dim):
    kind, args = spec
    if kind == "quadratic":
        return fam.SymbolSpec.quadratic(args["A"], args["B"], args["C"], dim=dim)
    return _symbol(spec)


def build_pipeline(cfg: ExperimentConfig) -> dict:
    """Construct every stage family in order; errors are reported with the stage line."""
    grid = cfg.grid
    out: dict = {}
    for st in cfg.stages:
        p = st.params
        try:
            if st.op == "symbol":
                F = fam.symbol_family(_quadratic_for_dim(p["symbol"], grid.dim), grid)
            elif st.op in ("gaussian", "composite"):
                spec = fam.GeneratorSpec(grid, p["A"], p["B"], p["C"])
                if st.op == "gaussian":
                    F = fam.gaussian_family(spec)
                else:
                    F = fam.composite_convolution_family(
                        spec, _quadratic_for_dim(p["symbol"], grid.dim))
            elif st.op == "poisson":
                F = fam.poisson_family(p["a"], grid)
            elif st.op == "potential":
                F = fam.potential_family(p["V"], grid)
            elif st.op == "shift":
                F = fam.shift_family(grid, p["interpolation"])
            elif st.op == "averaging":
                F = fam.averaging_family(p["atoms"], p["weights"], grid, p["interpolation"])
            elif st.op == "compose":
                F = cb.compose([out[n] for n in p["families"]])
            elif st.op == "theta_splitting":
                F = cb.theta_splitting(out[p["F1"]], out[p["F2"]], p["theta"])
            elif st.op == "convex_splitting":
                F = cb.convex_splitting(out[p["F1"]], out[p["F2"]], p["tau"])
            elif st.op == "multiplicative":
                F = cb.multiplicative_perturbation(out[p["F"]], p["a"])
            elif st.op == "dirichlet":
                mask = cb.DomainMask.from_boxes(grid, p["boxes"])
                F = cb.dirichlet_restrict(out[p["F"]], mask, p["cutoff"])
            elif st.op == "rotate":
                F = cb.rotate(out[p["F"]], p["mode"])
            elif st.op == "subordinate_density":
                sub = cb.SubordinatorSpec(p["sigma"], p["lam"], density="half_stable")
                F = cb.subordinate_known_density(out[p["F"]], sub, p["nodes"])
            elif st.op == "subordinate_measure":
                sub = cb.SubordinatorSpec(p["sigma"], p["lam"], p["atoms"], p["weights"])
                F = cb.subordinate_bounded_measure(out[p["F"]], sub)
            else:
                if grid.size > 4096:
                    raise ValueError("matrix families are limited to 4096 nodes")
                L = p["diffusion"] * fam.periodic_laplacian_matrix(grid)
                F = (fam.matrix_euler_family(L, grid) if st.op == "matrix_euler"
                     else fam.matrix_resolvent_family(L, grid))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"problem.stages[{st.name}]: {exc}",
                              cfg.lines.line("problem.stages", None, st.index) if cfg.lines else None,
                              f"problem.stages.{st.name}") from None
        F.name = st.name
        out[st.name] = F
    return out
