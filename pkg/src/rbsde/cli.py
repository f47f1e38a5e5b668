"""Command line front end: JSON config in, CSV/JSON reports out.

    rbsde <solve|oracle|schedule|diagnose|mc|validate> --config run.json [--out DIR] [--seed N] [--quiet]
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import (
    BarrierPair,
    Driver,
    GrowthWarning,
    HardViolation,
    ProblemSpec,
    SolutionQuadruple,
    TerminalCondition,
    TimeGrid,
    build_lattice,
    validate_problem,
)
from .diagnostics import (
    apriori_bounds,
    complementarity_defect,
    minimality_check,
    random_supersolutions,
    sample_test_pairs,
    shift_equivalence,
    skorohod_residual,
)
from .expr import ExprError, compile_expr, evaluate, free_vars, parse
from .lattice import InvalidPenalty, StepDiverged, UnstableStep, solve_penalized, solve_reflected_oracle
from .lipschitz import ApproxFamily, LevelTooLow
from .montecarlo import RegressionBasis, SingularRegression, simulate_paths, solve_penalized_mc
from .runner import CellFailure, PenalizationSchedule, double_limit_study, oracle_level, run_schedule

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SOLVER, EXIT_DIAGNOSTIC = 0, 1, 2, 3, 4
COMMANDS = ("solve", "oracle", "schedule", "diagnose", "mc", "validate")

SCHEDULE_COLUMNS = [
    "p", "m", "n", "y0", "e_supY2", "e_intZ2", "e_AT2", "e_KT2", "gap_vs_oracle", "mono_viol_m", "mono_viol_n",
]
SKOROHOD_COLUMNS = ["theta", "r_A", "r_K"]
THETAS = (0.0, 0.25, 0.5, 0.75, 1.0)
MINIMALITY_CANDIDATES = 50
ORACLE_FILE = "oracle.npz"

DEFAULTS = {
    "steps": 100,
    "lower": "none",
    "upper": "none",
    "solver": "lattice",
    "mc": {"paths": 10_000, "seed": 0, "basis_degree": 4, "increments": "coin"},
    "penalty": {"p": [], "m": [1024], "n": [1024], "tie_p_to_m": False},
    "output": {"dir": "rbsde_out", "formats": ["csv", "json"]},
}
REQUIRED = ("horizon", "driver", "growth_k", "terminal")


class ConfigSyntax(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class SchemaError(ValueError):
    pass


class IoError(OSError):
    pass


# --- config -----------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_block(name: str, block, spec: dict) -> dict:
    if not isinstance(block, dict):
        raise SchemaError(f"{name!r} must be an object")
    unknown = set(block) - set(spec)
    if unknown:
        raise SchemaError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
    out = dict(DEFAULTS[name])
    for key, value in block.items():
        ok, expected = spec[key](value)
        if not ok:
            raise SchemaError(f"{name}.{key} must be {expected}, got {value!r}")
        out[key] = value
    return out


def _number_list(v):
    return isinstance(v, list) and all(_is_number(x) for x in v), "a list of numbers"


_MC_SPEC = {
    "paths": lambda v: (_is_int(v) and v >= 1, "a positive integer"),
    "seed": lambda v: (_is_int(v) and 0 <= v < 2**64, "an unsigned 64-bit integer"),
    "basis_degree": lambda v: (_is_int(v) and v >= 0, "a nonnegative integer"),
    "increments": lambda v: (v in ("coin", "gauss"), '"coin" or "gauss"'),
}
_PENALTY_SPEC = {
    "p": _number_list,
    "m": _number_list,
    "n": _number_list,
    "tie_p_to_m": lambda v: (isinstance(v, bool), "a boolean"),
}
_OUTPUT_SPEC = {
    "dir": lambda v: (isinstance(v, str) and v != "", "a nonempty string"),
    "formats": lambda v: (
        isinstance(v, list) and all(f in ("csv", "json") for f in v),
        'a list drawn from "csv", "json"',
    ),
}


def normalize_config(raw: dict) -> dict:
    """Check keys and types and fill in defaults; returns a new dict."""
    if not isinstance(raw, dict):
        raise SchemaError("config must be a JSON object")
    allowed = set(REQUIRED) | set(DEFAULTS)
    unknown = set(raw) - allowed
    if unknown:
        raise SchemaError(f"unknown key(s): {sorted(unknown)}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise SchemaError(f"missing required key(s): {missing}")
    cfg = {}
    for key in ("horizon", "growth_k"):
        if not _is_number(raw[key]) or raw[key] <= 0:
            raise SchemaError(f"{key} must be a positive number, got {raw[key]!r}")
        cfg[key] = raw[key]
    steps = raw.get("steps", DEFAULTS["steps"])
    if not _is_int(steps) or steps < 1:
        raise SchemaError(f"steps must be a positive integer, got {steps!r}")
    cfg["steps"] = steps
    for key in ("driver", "terminal", "lower", "upper"):
        v = raw.get(key, DEFAULTS.get(key))
        if not isinstance(v, str):
            raise SchemaError(f"{key} must be an expression string, got {v!r}")
        cfg[key] = v
    solver = raw.get("solver", DEFAULTS["solver"])
    if solver not in ("lattice", "mc"):
        raise SchemaError(f'solver must be "lattice" or "mc", got {solver!r}')
    cfg["solver"] = solver
    cfg["mc"] = _check_block("mc", raw.get("mc", {}), _MC_SPEC)
    cfg["penalty"] = _check_block("penalty", raw.get("penalty", {}), _PENALTY_SPEC)
    cfg["output"] = _check_block("output", raw.get("output", {}), _OUTPUT_SPEC)
    return cfg


def canonical_text(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("ascii")).hexdigest()


@dataclass
class MCSettings:
    paths: int
    seed: int
    basis_degree: int
    increments: str


@dataclass
class RunPlan:
    config: dict
    schedule: PenalizationSchedule
    family: Optional[ApproxFamily]
    solver: str
    mc: MCSettings
    out_dir: Path
    formats: tuple
    config_hash: str
    driver_axes: tuple = field(default_factory=tuple)


def _barrier(source: str, role: str):
    if source.strip().lower() == "none":
        return None
    e = compile_expr(source, {"t", "x"}, role)

    def fn(t, x, _e=e):
        return evaluate(_e, {"t": t, "x": x})

    return fn


def probe_lipschitz_y(f, horizon: float, h: float = 1e-6) -> float:
    """Finite-difference estimate of ``sup |df/dy|`` on a fixed probe grid."""
    ys = np.linspace(-10.0, 10.0, 201)
    worst = 0.0
    for t in np.linspace(0.0, horizon, 5):
        for z in (-1.0, 0.0, 1.0):
            zz = np.full_like(ys, z)
            d = np.abs(np.asarray(f(t, ys + h, zz)) - np.asarray(f(t, ys, zz))) / h
            worst = max(worst, float(np.max(d)))
    return worst


def build_problem(cfg: dict) -> tuple[ProblemSpec, tuple]:
    drv_e = compile_expr(cfg["driver"], {"t", "y", "z"}, "driver")
    term_e = compile_expr(cfg["terminal"], {"x"}, "terminal")
    lower = _barrier(cfg["lower"], "lower barrier")
    upper = _barrier(cfg["upper"], "upper barrier")

    def f(t, y, z):
        return evaluate(drv_e, {"t": t, "y": y, "z": z})

    def xi(x):
        return evaluate(term_e, {"x": x})

    lip = probe_lipschitz_y(f, float(cfg["horizon"]))
    driver = Driver(f, float(cfg["growth_k"]), lipschitz_y=lip, name=cfg["driver"])
    grid = TimeGrid(float(cfg["horizon"]), int(cfg["steps"]))
    axes = tuple(a for a in ("y", "z") if a in free_vars(drv_e))
    return ProblemSpec(grid, driver, BarrierPair(lower, upper), TerminalCondition(xi)), axes


def load_config(path) -> tuple[ProblemSpec, RunPlan]:
    """Parse and check a JSON run config.

    Raises ``ConfigSyntax`` (with line and column), ``SchemaError`` or an
    ``ExprError`` from the expression parser.
    """
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigSyntax(f"config is not valid UTF-8: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntax(exc.msg, exc.lineno, exc.colno) from exc
    cfg = normalize_config(raw)
    problem, axes = build_problem(cfg)
    pen = cfg["penalty"]
    try:
        schedule = PenalizationSchedule(pen["p"], pen["m"], pen["n"], pen["tie_p_to_m"], growth_k=cfg["growth_k"])
    except ValueError as exc:
        raise SchemaError(f"penalty: {exc}") from exc
    family = None
    levels = schedule.m if schedule.tie_p_to_m else schedule.p
    if levels:
        try:
            family = ApproxFamily(
                problem.driver.f, problem.driver.growth_k, levels, axes=axes,
                time_dependent="t" in free_vars(parse(cfg["driver"])),
            )
        except LevelTooLow as exc:
            raise SchemaError(f"penalty: {exc}") from exc
    mc = MCSettings(**cfg["mc"])
    plan = RunPlan(
        config=cfg,
        schedule=schedule,
        family=family,
        solver=cfg["solver"],
        mc=mc,
        out_dir=Path(cfg["output"]["dir"]),
        formats=tuple(cfg["output"]["formats"]),
        config_hash=config_hash(cfg),
        driver_axes=axes,
    )
    return problem, plan


# --- persistence ---------------------------------------------------------------


def _clean(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _csv_cell(v) -> str:
    v = _clean(v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_reports(tables: dict, out_dir, formats, extra: Optional[dict] = None) -> list[Path]:
    """Write each ``name -> (columns, rows)`` table as ``name.csv`` and/or ``name.json``.

    Rows are dicts keyed by column name. ``extra`` maps file stems to JSON
    documents written when ``"json"`` is among the formats.
    """
    try:
        return _write_reports(tables, Path(out_dir), formats, extra)
    except OSError as exc:
        raise IoError(f"cannot write reports to {out_dir}: {exc}") from exc


def _write_reports(tables, out, formats, extra):
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, (columns, rows) in tables.items():
        if "csv" in formats:
            path = out / f"{name}.csv"
            with open(path, "w", newline="", encoding="ascii") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(columns)
                for row in rows:
                    w.writerow([_csv_cell(row.get(c)) for c in columns])
            files.append(path)
        if "json" in formats:
            path = out / f"{name}.json"
            body = [{c: _clean(row.get(c)) for c in columns} for row in rows]
            path.write_text(json.dumps(body, indent=2) + "\n", encoding="ascii")
            files.append(path)
    if extra and "json" in formats:
        for name, doc in extra.items():
            path = out / f"{name}.json"
            path.write_text(json.dumps(_clean(doc), indent=2) + "\n", encoding="ascii")
            files.append(path)
    return files


def write_manifest(out_dir, plan: RunPlan, command: str, started: str, files: list[Path]) -> Path:
    """Inventory of the run's files; always written last."""
    out = Path(out_dir)
    inventory = []
    for p in sorted(set(files)):
        data = Path(p).read_bytes()
        inventory.append({"file": Path(p).name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    doc = {
        "command": command,
        "config_hash": plan.config_hash,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
        "files": inventory,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="ascii")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def save_solution(path, q: SolutionQuadruple) -> Path:
    np.savez(
        path,
        steps=q.lattice.steps,
        horizon=q.lattice.grid.horizon,
        Y=np.concatenate(q.Y),
        Z=np.concatenate(q.Z),
        dA=np.concatenate(q.dA),
        dK=np.concatenate(q.dK),
    )
    return Path(path)


def load_solution(path, problem: ProblemSpec, label: str = "") -> SolutionQuadruple:
    data = np.load(path)
    lat = build_lattice(problem.grid)
    if int(data["steps"]) != lat.steps or float(data["horizon"]) != lat.grid.horizon:
        raise ValueError(f"{path} was produced on a different lattice")

    def split(flat, levels):
        out, s = [], 0
        for k in range(levels):
            out.append(flat[s:s + k + 1].copy())
            s += k + 1
        return out

    N = lat.steps
    return SolutionQuadruple(
        lat, split(data["Y"], N + 1), split(data["Z"], N), split(data["dA"], N), split(data["dK"], N), label
    )


# --- commands -----------------------------------------------------------------


def _summary_row(q: SolutionQuadruple, seed: int) -> dict:
    b = apriori_bounds(q, seed=seed)
    return {
        "y0": q.y0,
        "e_supY2": b.e_sup_y2,
        "e_supY2_se": b.e_sup_y2_se,
        "e_intZ2": b.e_int_z2,
        "e_AT2": b.e_a_T2,
        "e_KT2": b.e_k_T2,
    }


SUMMARY_COLUMNS = ["label", "p", "m", "n", "y0", "e_supY2", "e_supY2_se", "e_intZ2", "e_AT2", "e_KT2"]


def _cmd_validate(problem, plan, seed, log):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GrowthWarning)
        report = validate_problem(problem)
    for line in report.lines():
        log(line)
    for w in caught:
        log(f"warning: {w.message}")
    rows = [
        {"check": c.name, "passed": c.passed, "worst_node": str(c.worst_node), "worst_violation": c.worst_violation}
        for c in report.checks
    ]
    files = write_reports({"validation": (["check", "passed", "worst_node", "worst_violation"], rows)},
                          plan.out_dir, plan.formats)
    return (EXIT_OK if report.ok else EXIT_VALIDATION), files


def _top_level(plan: RunPlan):
    s = plan.schedule
    return s.level_for(s.m[-1]), s.m[-1], s.n[-1]


def _cmd_solve(problem, plan, seed, log):
    if plan.solver == "mc":
        return _cmd_mc(problem, plan, seed, log)
    p, m, n = _top_level(plan)
    drv = plan.family.driver(p) if p is not None else None
    q = solve_penalized(problem, m, n, drv)
    row = {"label": "penalized", "p": p, "m": m, "n": n, **_summary_row(q, seed)}
    log(f"penalized Y0 = {q.y0:.12g} (p={p}, m={m}, n={n})")
    files = write_reports({"summary": (SUMMARY_COLUMNS, [row])}, plan.out_dir, plan.formats)
    files.append(save_solution(plan.out_dir / "solution.npz", q))
    return EXIT_OK, files


def _oracle_problem(problem, plan):
    # with approximation levels the oracle runs on the top level, as in the schedule
    level = oracle_level(plan.schedule)
    if level is None:
        return problem
    return replace(problem, driver=plan.family.driver(level))


def _cmd_oracle(problem, plan, seed, log):
    q = solve_reflected_oracle(_oracle_problem(problem, plan))
    row = {"label": "oracle", **_summary_row(q, seed)}
    log(f"oracle Y0 = {q.y0:.12g}")
    files = write_reports({"summary": (SUMMARY_COLUMNS, [row])}, plan.out_dir, plan.formats)
    files.append(save_solution(plan.out_dir / ORACLE_FILE, q))
    return EXIT_OK, files


def _cmd_schedule(problem, plan, seed, log):
    workers = os.cpu_count() or 1
    report = run_schedule(problem, plan.schedule, plan.family, workers=workers, keep_solutions=False, sup_seed=seed)
    limits = double_limit_study(problem, plan.schedule, plan.family)
    rows = [{c: getattr(r, c) for c in SCHEDULE_COLUMNS} for r in report.records]
    summary = {
        "oracle_y0": report.oracle_y0,
        "oracle_bounds": report.oracle_bounds.__dict__,
        "decay_rate": report.decay_rate,
        "decay_points": [list(pt) for pt in report.decay_points],
        "envelope_max": report.envelope_max,
        "envelope_ratio": report.envelope_ratio,
        "violations_m": report.violations_m,
        "violations_n": report.violations_n,
        "double_limit": {
            "columns": [c.__dict__ for c in limits.columns],
            "hybrid_violations": limits.hybrid_violations,
            "final_gap_root": limits.final_gap_root,
            "final_gap_max": limits.final_gap_max,
        },
    }
    log(f"{len(rows)} cells; oracle Y0 = {report.oracle_y0:.12g}; decay rate = {report.decay_rate}")
    log(f"monotonicity violations: m {report.violations_m}, n {report.violations_n}")
    files = write_reports({"schedule": (SCHEDULE_COLUMNS, rows)}, plan.out_dir, plan.formats,
                          extra={"schedule_summary": summary})
    return EXIT_OK, files


def _cmd_diagnose(problem, plan, seed, log):
    problem = _oracle_problem(problem, plan)
    path = plan.out_dir / ORACLE_FILE
    if path.exists():
        oracle = load_solution(path, problem, "oracle")
    else:
        log(f"{path} not found; solving the oracle first")
        oracle = solve_reflected_oracle(problem)
    rows = []
    worst = 0.0
    for pair in sample_test_pairs(oracle, problem, THETAS):
        ra, rk = skorohod_residual(oracle, pair, problem)
        rows.append({"theta": pair.theta, "r_A": ra, "r_K": rk})
        worst = max(worst, ra, rk)
    comp = complementarity_defect(oracle, problem)
    shift_gap = shift_equivalence(problem, oracle, seed=seed)
    cands = random_supersolutions(problem, oracle, MINIMALITY_CANDIDATES, seed=seed)
    mini = minimality_check(problem, cands, oracle)
    bounds = apriori_bounds(oracle, seed=seed)
    extra = {
        "diagnostics": {
            "max_skorohod_residual": worst,
            "complementarity_defect": list(comp),
            "shift_equivalence_gap": shift_gap,
            "minimality": {"candidates": mini.candidates, "violations": mini.violations, "worst": mini.worst},
            "apriori_bounds": bounds.__dict__,
        }
    }
    for r in rows:
        log(f"theta={r['theta']}: r_A={r['r_A']:.3g} r_K={r['r_K']:.3g}")
    log(f"shift equivalence gap {shift_gap:.3g}; minimality violations {mini.violations}")
    files = write_reports({"skorohod": (SKOROHOD_COLUMNS, rows)}, plan.out_dir, plan.formats, extra=extra)
    failed = worst > 1e-12 or max(comp) > 1e-12 or shift_gap > 1e-10 or not mini.passed
    return (EXIT_DIAGNOSTIC if failed else EXIT_OK), files


def _cmd_mc(problem, plan, seed, log):
    p, m, n = _top_level(plan)
    drv = plan.family.driver(p) if p is not None else problem.driver
    bundle = simulate_paths(problem.grid, plan.mc.paths, seed, plan.mc.increments)
    res = solve_penalized_mc(
        bundle, drv, problem.terminal, RegressionBasis(plan.mc.basis_degree), problem.barriers, m, n
    )
    row = {"p": p, "m": m, "n": n, "seed": seed, "paths": plan.mc.paths, "y0": res.y0, "y0_stderr": res.y0_stderr,
           **res.stats}
    cols = ["p", "m", "n", "seed", "paths", "y0", "y0_stderr"] + list(res.stats)
    log(f"MC Y0 = {res.y0:.8g} +/- {res.y0_stderr:.2g} ({plan.mc.paths} paths, seed {seed})")
    return EXIT_OK, write_reports({"mc": (cols, [row])}, plan.out_dir, plan.formats)


HANDLERS = {
    "validate": _cmd_validate,
    "solve": _cmd_solve,
    "oracle": _cmd_oracle,
    "schedule": _cmd_schedule,
    "diagnose": _cmd_diagnose,
    "mc": _cmd_mc,
}
SOLVER_ERRORS = (StepDiverged, UnstableStep, InvalidPenalty, CellFailure, SingularRegression, ExprError)


def dispatch(command: str, problem: ProblemSpec, plan: RunPlan, seed: Optional[int] = None, quiet: bool = False) -> int:
    """Run one subcommand and return its exit code."""
    def log(msg):
        if not quiet:
            print(msg)

    if command not in HANDLERS:
        print(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    seed = plan.mc.seed if seed is None else seed
    started = _now()
    try:
        if command != "validate":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", GrowthWarning)
                validate_problem(problem)
        code, files = HANDLERS[command](problem, plan, seed, log)
    except HardViolation as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SOLVER_ERRORS as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    try:
        write_manifest(plan.out_dir, plan, command, started, files)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbsde", description="Doubly reflected BSDE penalization lab")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--seed", type=int, help="seed for sampled statistics and Monte Carlo (overrides mc.seed)")
    ap.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        problem, plan = load_config(args.config)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigSyntax, SchemaError, ExprError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        plan.out_dir = Path(args.out)
    return dispatch(args.command, problem, plan, seed=args.seed, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
