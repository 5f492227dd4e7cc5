"""Bench problems: convex solutions with known Hessian structure.

Closed-form problems are sampled directly; ``poisson_concave`` is produced by
a finite-difference Poisson solve on the bounding box of the grid, restricted
to the ball afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .errors import ConfigurationError, ConvergenceError, EllipticityError
from .field import Grid, ScalarField, sample
from .operators import (
    RHS_REGISTRY,
    OperatorF,
    StructureSample,
    check_structure,
    ellipticity_bounds,
    make_operator,
    pde_residual,
    solution_state,
)
from .spectra import eigen_field

SUPPORTED_DIMS = (2, 3, 4)
PROBLEM_NAMES = ("quad_full", "quad_rank1", "logdet_flat", "poisson_concave", "rank_control")
CONVEXITY_TOL = 1e-8
# residual floor for problems that are exact up to round-off or solver tolerance
RESIDUAL_FLOOR = 1e-8


@dataclass
class TestProblem:
    """A convex solution paired with the operator it solves.

    ``expected_rank`` is an integer or the string ``"nonconstant"``;
    ``structure_expected`` is one of ``PASS``, ``FAIL`` or ``UNTESTED``.
    ``K`` sets the residual budget ``10 K h^2``.
    """

    __test__ = False  # not a pytest class

    name: str
    operator: OperatorF | None
    solution: ScalarField
    expected_rank: int | str
    structure_expected: str
    notes: str = ""
    K: float = 1.0
    info: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.solution.grid


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    history: list


def _laplacian_1d(m: int, h: float) -> sp.csr_matrix:
    return sp.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1], format="csr") / h**2


def _box_laplacian(m: int, dim: int, h: float) -> sp.csr_matrix:
    """Negative ``(2n+1)``-point Laplacian on ``m^n`` interior box nodes (SPD)."""
    L1 = _laplacian_1d(m, h)
    eye = sp.identity(m, format="csr")
    total = sp.csr_matrix((m**dim, m**dim))
    for axis in range(dim):
        term = None
        for j in range(dim):
            factor = L1 if j == axis else eye
            term = factor if term is None else sp.kron(term, factor, format="csr")
        total = total + term
    return (-total).tocsr()


def solve_elliptic(
    rhs: Callable,
    boundary: Callable,
    grid: Grid,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    return_info: bool = False,
    log_path=None,
):
    """Solve ``Delta_h u = rhs`` on the bounding box of ``grid`` with Dirichlet data.

    Parameters
    ----------
    rhs, boundary
        Vectorized callables of an ``(npts, dim)`` coordinate array.  The
        right-hand side is needed on the whole box, not only on the ball.
    grid
        Target grid; the solve runs on the cube ``[-r, r]^n`` with the same
        spacing and the result is restricted to the ball.
    tol
        Bound on the max-norm of the algebraic residual ``Delta_h u - rhs``.
    max_iter
        Conjugate-gradient iteration cap.
    log_path
        If given, the ``(iteration, residual)`` history is written as CSV.

    Raises
    ------
    ConvergenceError
        If the residual is still above ``tol`` after ``max_iter`` iterations.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    n, h, N = grid.dim, grid.spacing, grid.steps
    m = 2 * N - 1
    coords = np.arange(-N, N + 1) * h
    mesh = np.stack(np.meshgrid(*([coords] * n), indexing="ij"), axis=-1)
    full = np.zeros((2 * N + 1,) * n)
    interior = (slice(1, -1),) * n
    edge = np.ones(full.shape, dtype=bool)
    edge[interior] = False
    full[edge] = np.asarray(boundary(mesh[edge]), dtype=float)

    # move the known boundary values to the right-hand side
    b = -np.asarray(rhs(mesh[interior].reshape(-1, n)), dtype=float).reshape((m,) * n)
    for axis in range(n):
        for side, nb in ((0, 0), (-1, -1)):
            sl = [slice(1, -1)] * n
            sl[axis] = nb
            idx = [slice(None)] * n
            idx[axis] = side
            b[tuple(idx)] += full[tuple(sl)] / h**2
    b = b.reshape(-1)

    A = _box_laplacian(m, n, h)
    history = []

    def record(xk):
        r = float(np.max(np.abs(b - A @ xk)))
        history.append((len(history) + 1, r))

    sol = np.zeros_like(b)
    residual = float(np.max(np.abs(b)))
    # restart from the current iterate when the recursive residual has drifted
    # away from the true one
    while residual > tol and len(history) < max_iter:
        start = len(history)
        sol, _ = cg(A, b, x0=sol, rtol=0.0, atol=tol, maxiter=max_iter - start, callback=record)
        residual = float(np.max(np.abs(b - A @ sol)))
        if len(history) == start:
            break
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "residual"])
            writer.writerows(history)
    if residual > tol:
        raise ConvergenceError(
            f"solver stopped after {len(history)} iterations with residual {residual:.3e} > {tol:.3e}", history
        )
    full[interior] = sol.reshape((m,) * n)
    values = full[tuple((grid.index + N).T)]
    out = ScalarField(grid, values, "u")
    if return_info:
        return out, SolveInfo(len(history), residual, history)
    return out


# ---------------------------------------------------------------------------
# catalog


def concave_manufactured(dim: int) -> Callable:
    """Radial ``u*`` with ``Delta u* = 3 - |x|^2/2``: ``3 r^2/(2n) - r^4/(8n+16)``."""
    a, b = 3.0 / (2 * dim), -1.0 / (8 * dim + 16)

    def u_star(x):
        r2 = (np.asarray(x) ** 2).sum(axis=-1)
        return a * r2 + b * r2**2

    return u_star


def _sq(x):
    return (x**2).sum(axis=-1)


def _check_dim(dim, grid):
    if dim not in SUPPORTED_DIMS:
        raise ConfigurationError(f"bench problems support dim in {SUPPORTED_DIMS}, got {dim}")
    if grid.dim != dim:
        raise ConfigurationError(f"grid has dim {grid.dim}, expected {dim}")


def make_problem(name: str, dim: int, grid: Grid, solver_tol: float = 1e-10, solver_log=None) -> TestProblem:
    _check_dim(dim, grid)
    if name == "quad_full":
        u = sample(grid, lambda x: 0.5 * _sq(x), vectorized=True)
        return TestProblem(name, make_operator(f"poisson({dim})", dim), u, dim, "PASS", "u = |x|^2/2, F = tr A - n")
    if name == "quad_rank1":
        u = sample(grid, lambda x: 0.5 * x[:, 0] ** 2, vectorized=True)
        return TestProblem(name, make_operator("poisson(1)", dim), u, 1, "PASS", "u = x_1^2/2, F = tr A - 1")
    if name == "logdet_flat":
        u = sample(grid, lambda x: 0.5 * _sq(x), vectorized=True)
        return TestProblem(name, make_operator("logdet(0)", dim), u, dim, "PASS", "u = |x|^2/2, F = log det A")
    if name == "poisson_concave":
        f = RHS_REGISTRY["concave"].f
        u, info = solve_elliptic(
            f, concave_manufactured(dim), grid, tol=solver_tol, return_info=True, log_path=solver_log
        )
        return TestProblem(
            name,
            make_operator("poisson_rhs(concave)", dim),
            u,
            dim,
            "PASS",
            "finite-difference solve of Delta u = 3 - |x|^2/2 with manufactured boundary data",
            info={"iterations": info.iterations, "solver_residual": info.residual},
        )
    if name == "rank_control":
        u = sample(grid, lambda x: x[:, 0] ** 4 / 12 + 0.5 * x[:, 1] ** 2, vectorized=True)
        return TestProblem(
            name,
            make_operator("poisson_rhs(rank_control)", dim),
            u,
            "nonconstant",
            "UNTESTED",
            "u = x_1^4/12 + x_2^2/2; negative control for the rank detector, no operator claim",
        )
    raise ConfigurationError(f"unknown bench problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")


def catalog(dim: int, grid: Grid) -> list:
    """All bench problems on ``grid``."""
    _check_dim(dim, grid)
    return [make_problem(name, dim, grid) for name in PROBLEM_NAMES]


# ---------------------------------------------------------------------------
# validation


def state_box(problem: TestProblem, n_samples: int = 10_000, seed: int = 0, margin: float = 0.5) -> StructureSample:
    """Structure-check sampling box around the range of the problem's solution."""
    A, p, u, _, grid = solution_state(problem.solution)
    lam_max = float(np.abs(np.linalg.eigvalsh(A)).max())
    n = grid.dim

    def widen(lo, hi):
        pad = margin * max(1.0, hi - lo)
        return (float(lo - pad), float(hi + pad))

    return StructureSample(
        n_samples=n_samples,
        seed=seed,
        a_scale=float(np.sqrt(max(lam_max, 1.0) / n)),
        p_range=widen(p.min(), p.max()),
        u_range=widen(u.min(), u.max()),
        x_radius=grid.radius,
    )


@dataclass
class ValidationReport:
    problem: str
    checks: dict

    @property
    def passed(self) -> bool:
        return all(c["status"] in ("PASS", "UNTESTED") for c in self.checks.values())

    def to_dict(self) -> dict:
        return {"problem": self.problem, "passed": self.passed, "checks": self.checks}


def validate(problem: TestProblem, structure_samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Convexity, residual, ellipticity and (optionally) structure checks."""
    checks = {}
    h = problem.grid.spacing
    eig = eigen_field(problem.solution)
    lam = eig.eigenvalues
    tol = CONVEXITY_TOL * max(1.0, eig.global_max)
    lo = float(lam[:, 0].min())
    checks["convexity"] = {"status": "PASS" if lo >= -tol else "FAIL", "min_eigenvalue": lo, "tol": tol}

    F = problem.operator
    if F is None:
        checks["residual"] = checks["ellipticity"] = {"status": "UNTESTED"}
    else:
        res = pde_residual(F, problem.solution)
        bound = 10 * problem.K * h**2 + RESIDUAL_FLOOR
        ok = res <= bound
        if problem.structure_expected == "UNTESTED":
            status = "UNTESTED"
        else:
            status = "PASS" if ok else "FAIL"
        checks["residual"] = {"status": status, "residual": res, "bound": bound}
        try:
            ell = ellipticity_bounds(F, problem.solution)
            checks["ellipticity"] = {
                "status": "PASS",
                "Lambda": ell.Lambda,
                "min_eig": ell.min_eig,
                "max_eig": ell.max_eig,
            }
        except EllipticityError as exc:
            checks["ellipticity"] = {"status": "FAIL", "error": str(exc), "point": list(exc.point or ())}

    if F is None or problem.structure_expected == "UNTESTED":
        checks["structure"] = {"status": "UNTESTED"}
    else:
        rep = check_structure(F, state_box(problem, structure_samples, seed))
        status = "PASS" if rep.verdict == problem.structure_expected else "FAIL"
        checks["structure"] = {"status": status, "verdict": rep.verdict, "expected": problem.structure_expected,
                               "min_gap": rep.min_gap, "n_samples": rep.n_samples, "seed": rep.seed}  # fmt: skip
    return ValidationReport(problem.name, checks)
