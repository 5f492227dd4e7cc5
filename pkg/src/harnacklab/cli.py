"""Scenario runner.

Usage::

    harnacklab run scenarios/quad_full_n2.yaml [--seed N] [--grid-h 1/32] [--out DIR]
    harnacklab dump poisson_concave out/ [--dim 2] [--grid-h 1/16]
    harnacklab list-problems

Exit status: 0 when every entry passes (declared negative controls count as
passing when they fail as declared), 1 on a failing entry, 2 when the
scenario file cannot be parsed or validated.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .bench import PROBLEM_NAMES, make_problem, validate
from .errors import HarnackLabError
from .field import Grid, write_columns_csv
from .spectra import block_ids, default_gap_tol, eigen_field
from .verify import (
    gradient_chain_bound,
    harnack_verdict,
    r_subsolution_constant,
    rank_map,
    variation,
)

log = logging.getLogger("harnacklab")

SCHEMA = 1
SCENARIO_VERSION = 1
EXPECTABLE = {"rank": {"NONCONSTANT"}, "harnack": {"INCONSISTENT"}, "structure": {"FAIL"}}


class ScenarioError(Exception):
    """Scenario file problem, with an optional source position."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line, self.column = line, column

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return f"line {self.line}, column {self.column}: {msg}"
        return msg


@dataclass
class Scenario:
    name: str
    dim: int
    grid_h: float
    problems: list
    ell: list
    q: list
    eps_schedule: list
    gap_tol: float | None = None
    zero_tol: float | None = None
    structure_samples: int = 10_000
    seed: int = 0
    output_dir: str = "out"
    expect: dict = field(default_factory=dict)
    dump: bool = False

    def echo(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "grid_h": self.grid_h,
            "problems": list(self.problems),
            "ell": list(self.ell),
            "q": list(self.q),
            "eps_schedule": list(self.eps_schedule),
            "gap_tol": self.gap_tol,
            "zero_tol": self.zero_tol,
            "structure_samples": self.structure_samples,
            "seed": self.seed,
            "expect": self.expect,
        }


def parse_number(value) -> float:
    """Accept numbers and fraction strings such as ``"1/32"``."""
    if isinstance(value, bool):
        raise ValueError("booleans are not numbers")
    if isinstance(value, (int, float)):
        return float(value)
    return float(Fraction(str(value).strip()))


def _key_marks(text: str) -> dict:
    """Source position of every top-level key, for error messages."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: (k.start_mark.line + 1, k.start_mark.column + 1) for k, _ in node.value}


def load_scenario(path) -> Scenario:
    """Parse and validate a YAML scenario file; raises :class:`ScenarioError`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        if mark is not None:
            raise ScenarioError(problem, mark.line + 1, mark.column + 1) from None
        raise ScenarioError(problem) from None
    marks = _key_marks(text)

    def fail(key, msg):
        line, col = marks.get(key, (None, None))
        raise ScenarioError(f"{key}: {msg}", line, col)

    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping", 1, 1)
    known = set(Scenario.__dataclass_fields__) | {"version"}
    for key in data:
        if key not in known:
            fail(key, "unknown key")
    if data.get("version") != SCENARIO_VERSION:
        fail("version", f"expected version {SCENARIO_VERSION}")
    for key in ("name", "dim", "grid_h", "problems", "ell", "q", "eps_schedule"):
        if key not in data:
            raise ScenarioError(f"missing required key {key!r}")

    try:
        dim = int(data["dim"])
    except (TypeError, ValueError):
        fail("dim", "must be an integer")
    try:
        grid_h = parse_number(data["grid_h"])
    except (TypeError, ValueError, ZeroDivisionError):
        fail("grid_h", "must be a number or fraction")

    problems = data["problems"]
    if not isinstance(problems, list) or not problems:
        fail("problems", "must be a nonempty list")
    for p in problems:
        if p not in PROBLEM_NAMES:
            fail("problems", f"unknown problem {p!r}")

    def number_list(key, positive=True):
        vals = data[key]
        if not isinstance(vals, list) or not vals:
            fail(key, "must be a nonempty list")
        try:
            out = [parse_number(v) for v in vals]
        except (TypeError, ValueError, ZeroDivisionError):
            fail(key, "entries must be numbers")
        if positive and any(not v > 0 for v in out):
            fail(key, "entries must be positive")
        return out

    ell = number_list("ell")
    if any(int(e) != e or not 1 <= e <= dim for e in ell):
        fail("ell", f"entries must be integers in 1..{dim}")
    q = number_list("q")
    eps = number_list("eps_schedule")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        fail("eps_schedule", "must be strictly decreasing")

    opt = {}
    for key in ("gap_tol", "zero_tol"):
        if data.get(key) is not None:
            try:
                opt[key] = parse_number(data[key])
            except (TypeError, ValueError, ZeroDivisionError):
                fail(key, "must be a number")
            if not opt[key] > 0:
                fail(key, "must be positive")
    for key in ("structure_samples", "seed"):
        if key in data:
            v = data[key]
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                fail(key, "must be a nonnegative integer")
            opt[key] = v
    if "output_dir" in data:
        opt["output_dir"] = str(data["output_dir"])
    if "dump" in data:
        opt["dump"] = bool(data["dump"])

    expect = data.get("expect") or {}
    if not isinstance(expect, dict):
        fail("expect", "must be a mapping of problem -> declared failures")
    for prob, decl in expect.items():
        if prob not in problems:
            fail("expect", f"{prob!r} is not among the scenario problems")
        if not isinstance(decl, dict):
            fail("expect", f"declaration for {prob!r} must be a mapping")
        for check, value in decl.items():
            if check not in EXPECTABLE or value not in EXPECTABLE[check]:
                fail("expect", f"cannot declare {check}: {value} for {prob!r}")

    return Scenario(
        name=str(data["name"]),
        dim=dim,
        grid_h=grid_h,
        problems=list(problems),
        ell=[int(e) for e in ell],
        q=q,
        eps_schedule=eps,
        expect=expect,
        **opt,
    )


# ---------------------------------------------------------------------------
# running


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _grid_echo(grid: Grid) -> dict:
    return {"dim": grid.dim, "h": grid.spacing, "points": len(grid)}


def block_patterns(eig, gap_tol=None) -> list:
    """Distinct multiplicity-block size lists with the number of points showing each."""
    lam = eig.eigenvalues
    tol = default_gap_tol(lam) if gap_tol is None else np.full(len(lam), gap_tol)
    bid = block_ids(lam, tol)
    sizes = Counter(tuple(int(c) for c in np.bincount(row) if c) for row in bid)
    return [{"sizes": list(k), "count": v} for k, v in sorted(sizes.items())]


def run_problem(sc: Scenario, name: str, grid: Grid, timings: dict, out_dir: Path, verbose: bool = False) -> tuple:
    """All checks for one problem; returns ``(problem_entry, harnack_entries, failures)``."""
    declared = sc.expect.get(name, {})
    failures = []
    t0 = time.perf_counter()
    solver_log = out_dir / f"{name}_solver.csv" if verbose and name == "poisson_concave" else None
    problem = make_problem(name, sc.dim, grid, solver_log=solver_log)
    log.info("%s: built on %d points", name, len(grid))
    timings[f"{name}/build"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = validate(problem, sc.structure_samples, sc.seed)
    timings[f"{name}/validate"] = time.perf_counter() - t0
    checks = dict(report.checks)
    structure = checks.pop("structure")
    for check, entry in checks.items():
        if entry["status"] == "FAIL":
            failures.append(f"{name}: {check} check failed")
    if structure.get("verdict") == "FAIL" and declared.get("structure") == "FAIL":
        structure["status"] = "EXPECTED_FAIL"
    elif structure["status"] == "FAIL":
        failures.append(f"{name}: structure verdict {structure.get('verdict')}")

    t0 = time.perf_counter()
    eig = eigen_field(problem.solution)
    rmap = rank_map(eig)
    rank_verdict = rmap.verdict
    if rank_verdict == "NONCONSTANT":
        if declared.get("rank") == "NONCONSTANT":
            rank_status = "EXPECTED_FAIL"
        else:
            rank_status = "FAIL"
            failures.append(f"{name}: rank verdict NONCONSTANT {rmap.observed}")
    else:
        if declared.get("rank") == "NONCONSTANT":
            rank_status = "FAIL"
            failures.append(f"{name}: declared negative control gave {rank_verdict}")
        elif isinstance(problem.expected_rank, int) and rank_verdict != f"CONSTANT({problem.expected_rank})":
            rank_status = "FAIL"
            failures.append(f"{name}: rank verdict {rank_verdict}, expected CONSTANT({problem.expected_rank})")
        else:
            rank_status = "PASS"
    timings[f"{name}/rank"] = time.perf_counter() - t0

    entries = []
    seen_inconsistent = False
    for ell in sc.ell:
        t0 = time.perf_counter()
        c_star, excluded, c_error = {}, 0, None
        try:
            for eps in sc.eps_schedule:
                c = r_subsolution_constant(problem.operator, problem.solution, ell, eps, sc.gap_tol)
                c_star[repr(eps)] = c.value
                excluded = max(excluded, c.excluded)
        except HarnackLabError as exc:
            c_error = f"{type(exc).__name__}: {exc}"
        try:
            chain = gradient_chain_bound(problem.solution, ell, sc.eps_schedule[-1], sc.gap_tol)
            chain_value, chain_error = chain.value, None
        except HarnackLabError as exc:
            chain_value, chain_error = None, f"{type(exc).__name__}: {exc}"
        timings[f"{name}/ell={ell}/constants"] = time.perf_counter() - t0
        for q in sc.q:
            hv = harnack_verdict(eig, ell, q, zero_tol=sc.zero_tol)
            status = "PASS"
            if hv.status == "INCONSISTENT":
                seen_inconsistent = True
                status = "EXPECTED_FAIL" if declared.get("harnack") == "INCONSISTENT" else "FAIL"
            if c_error or chain_error:
                status = "FAIL"
            entry = {
                "problem": name,
                "ell": ell,
                "q": q,
                "verdict": hv.status,
                "ratio": hv.ratio,
                "lq_average": hv.lq_average,
                "infimum": hv.infimum,
                "zero_tol": hv.zero_tol,
                "rank_verdict": rank_verdict,
                "C_star": c_star,
                "C_star_variation": variation(c_star.values()) if c_star else None,
                "chain_constant": chain_value,
                "eps_schedule": list(sc.eps_schedule),
                "excluded_points": excluded,
                "grid": _grid_echo(grid),
                "seed": sc.seed,
                "status": status,
            }
            if c_error:
                entry["C_star_error"] = c_error
            if chain_error:
                entry["chain_error"] = chain_error
            if status == "FAIL":
                failures.append(f"{name}: ell={ell} q={q} verdict {hv.status}" + (f" ({c_error or chain_error})" if c_error or chain_error else ""))
            entries.append(entry)
    if declared.get("harnack") == "INCONSISTENT" and not seen_inconsistent:
        failures.append(f"{name}: declared INCONSISTENT control never triggered")

    problem_entry = {
        "problem": name,
        "expected_rank": problem.expected_rank,
        "structure_expected": problem.structure_expected,
        "notes": problem.notes,
        "validation": checks,
        "structure": structure,
        "rank_verdict": rank_verdict,
        "rank_status": rank_status,
        "rank_counts": rmap.counts,
        "rank_tol": rmap.tol,
        "block_structures": block_patterns(eig, sc.gap_tol),
        "grid": _grid_echo(grid),
        "seed": sc.seed,
    }
    if problem.info:
        problem_entry["solver"] = problem.info
    if sc.dump:
        dump_fields(name, grid, out_dir / name)
    return problem_entry, entries, failures


def run_scenario(sc: Scenario, out_dir: Path, verbose: bool = False) -> tuple:
    """Execute a scenario, write ``report.json`` and ``timings.json``; return ``(report, failures)``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = Grid(sc.dim, sc.grid_h)
    timings, problems, entries, failures = {}, [], [], []
    for name in sc.problems:
        p, e, f = run_problem(sc, name, grid, timings, out_dir, verbose)
        problems.append(p)
        entries.extend(e)
        failures.extend(f)
    report = {
        "schema": SCHEMA,
        "tool": {"name": "harnacklab", "version": tool_version()},
        "scenario": sc.echo(),
        "seed": sc.seed,
        "grid": _grid_echo(grid),
        "problems": problems,
        "entries": entries,
        "summary": {"passed": not failures, "failures": failures},
    }
    report = _clean(report)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "timings.json").write_text(json.dumps(_clean(timings), indent=2, sort_keys=True) + "\n")
    return report, failures


def dump_fields(problem: str, grid: Grid, out_dir) -> list:
    """Write ``u.csv`` on the grid and ``spectrum.csv`` (lambda, Q, rank) on the Hessian grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prob = make_problem(problem, grid.dim, grid)
    eig = eigen_field(prob.solution)
    n = grid.dim
    cols = {f"lambda_{i}": eig.eigenvalues[:, i - 1] for i in range(1, n + 1)}
    cols.update({f"Q_{k}": eig.q_field(k).values for k in range(1, n + 1)})
    cols["rank"] = rank_map(eig).ranks
    paths = [out_dir / "u.csv", out_dir / "spectrum.csv"]
    write_columns_csv(grid, {"u": prob.solution.values}, paths[0])
    write_columns_csv(eig.grid, cols, paths[1])
    return paths


# ---------------------------------------------------------------------------
# command line


def _grid_h(text: str) -> float:
    try:
        return parse_number(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harnacklab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--grid-h", type=_grid_h, help="override the grid spacing")
    run.add_argument("--out", help="override the output directory")

    dump = sub.add_parser("dump", help="write CSV dumps of one bench problem")
    dump.add_argument("problem", choices=PROBLEM_NAMES)
    dump.add_argument("out_dir")
    dump.add_argument("--dim", type=int, default=2)
    dump.add_argument("--grid-h", type=_grid_h, default=1 / 16)

    sub.add_parser("list-problems", help="list bench problem names")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "list-problems":
        for name in PROBLEM_NAMES:
            print(name)
        return 0

    if args.command == "dump":
        try:
            paths = dump_fields(args.problem, Grid(args.dim, args.grid_h), args.out_dir)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except HarnackLabError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for p in paths:
            print(p)
        return 0

    try:
        sc = load_scenario(args.scenario)
        if args.seed is not None:
            sc.seed = args.seed
        if args.grid_h is not None:
            sc.grid_h = args.grid_h
        Grid(sc.dim, sc.grid_h)
        if sc.dim not in (2, 3, 4):
            raise ScenarioError(f"dim: bench problems need dim in 2..4, got {sc.dim}")
    except ScenarioError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return 2
    except HarnackLabError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out or sc.output_dir)
    log.info("running %s (dim %d, h %g) into %s", sc.name, sc.dim, sc.grid_h, out_dir)
    try:
        report, failures = run_scenario(sc, out_dir, args.verbose)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    for e in report["entries"]:
        ratio = e["ratio"] if e["ratio"] is not None else e["verdict"]
        print(f"{e['status']:<13} {e['problem']:<16} ell={e['ell']} q={e['q']:<6g} {ratio} rank={e['rank_verdict']}")
    for f in failures:
        print(f"FAIL: {f}")
    print(f"{sc.name}: {'ok' if not failures else f'{len(failures)} failure(s)'}; report in {out_dir / 'report.json'}")
    return 0 if not failures else 1


if __name__ == "__main__":
    sys.exit(main())
