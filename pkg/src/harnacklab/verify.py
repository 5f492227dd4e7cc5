"""Quantitative verdicts on bench solutions.

Rank maps and Harnack ratios of eigenvalue fields, the empirical constants of
the ``R`` subsolution inequality and of the gradient chain bound, and a
generic weak Harnack check for linear subsolutions.  Empirical constants are
measured and stability-tested; nothing here claims a theoretical value.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    EllipticityError,
    InconsistencyError,
    NotASubsolutionError,
    ParameterError,
    UnreliableSampleError,
)
from .field import (
    Grid,
    Region,
    ScalarField,
    derivative_tensor,
    integrate_lq,
    margin_for_order,
    mollify,
    stencil_offsets,
)
from .operators import OperatorF, solution_state
from .spectra import EigenField, crossing_mask, eigen_field

MAX_EXCLUDED_FRACTION = 0.2
TINY = 1e-14


def discretization_tol(h: float) -> float:
    """Relative zero tolerance that absorbs the ``O(h^2)`` bias of centred differences."""
    return max(1e-8, 0.5 * h * h)


def roundoff_floor(u: ScalarField) -> float:
    """Noise level of a first difference of second differences of ``u``.

    Sample round-off ``eps_mach * max|u|`` is amplified by ``h^-3``; a safety
    factor of 1e3 keeps the chain bound from dividing noise by noise.
    """
    scale = max(1.0, float(np.max(np.abs(u.values))))
    return max(TINY, 1e3 * np.finfo(float).eps * scale / u.grid.spacing**3)


def variation(values) -> float:
    """Spread ``(max - min) / max |value|`` of a set of estimates."""
    v = np.asarray(list(values), dtype=float)
    top = np.max(np.abs(v))
    return 0.0 if top == 0 else float((v.max() - v.min()) / top)


# ---------------------------------------------------------------------------
# rank and Harnack verdicts


@dataclass
class RankMap:
    grid: Grid
    ranks: np.ndarray
    tol: float
    counts: dict

    @property
    def constant(self) -> bool:
        return len(self.counts) == 1

    @property
    def verdict(self) -> str:
        if self.constant:
            return f"CONSTANT({next(iter(self.counts))})"
        return "NONCONSTANT"

    @property
    def observed(self) -> tuple:
        return tuple(sorted(self.counts))


def rank_map(eig: EigenField, tol: float | None = None, floor: float = 1.0) -> RankMap:
    """Numerical rank of the Hessian at every point of the eigenvalue grid.

    An eigenvalue counts when it exceeds ``tol * max(floor, lambda_n(x))``.
    ``tol`` defaults to :func:`discretization_tol`; pass ``floor=t`` when
    comparing a solution with its multiple ``t u``.
    """
    tol = discretization_tol(eig.grid.spacing) if tol is None else tol
    if not tol > 0:
        raise ParameterError("rank tolerance must be positive")
    lam = eig.eigenvalues
    thresh = tol * np.maximum(floor, lam[:, -1])
    ranks = (lam > thresh[:, None]).sum(axis=1)
    counts = {int(k): int(v) for k, v in sorted(Counter(ranks.tolist()).items())}
    return RankMap(eig.grid, ranks, tol, counts)


@dataclass
class HarnackVerdict:
    ell: int
    q: float
    lq_average: float
    infimum: float
    status: str  # RATIO, DEGENERATE or INCONSISTENT
    ratio: float | None
    region: Region
    zero_tol: float

    def to_dict(self) -> dict:
        return {
            "ell": self.ell,
            "q": self.q,
            "status": self.status,
            "ratio": self.ratio,
            "lq_average": self.lq_average,
            "infimum": self.infimum,
            "zero_tol": self.zero_tol,
        }


def default_zero_tol(eig: EigenField) -> float:
    return discretization_tol(eig.grid.spacing) * max(1.0, eig.global_max)


def harnack_verdict(
    eig: EigenField, ell: int, q: float, region: Region | None = None, zero_tol: float | None = None
) -> HarnackVerdict:
    """Compare the ``L^q`` average of ``lambda_ell`` on ``region`` with its infimum."""
    if not q > 0:
        raise ParameterError(f"q must be positive, got {q}")
    region = region or Region.ball(eig.dim)
    zero_tol = default_zero_tol(eig) if zero_tol is None else zero_tol
    lam = eig.lambda_field(ell)
    vals = lam.values
    if np.any(vals < -zero_tol):
        raise DomainError(f"lambda_{ell} is negative beyond tolerance ({vals.min():.3e})")
    # round-off negatives of a convex solution
    field = ScalarField(eig.grid, np.maximum(vals, 0.0), lam.name)
    avg = integrate_lq(field, region, q)
    inf = float(field.values[region.mask(eig.grid)].min())
    if inf > zero_tol:
        status, ratio = "RATIO", avg / inf
    elif avg <= zero_tol:
        status, ratio = "DEGENERATE", None
    else:
        status, ratio = "INCONSISTENT", None
    return HarnackVerdict(ell, q, avg, inf, status, ratio, region, zero_tol)


# ---------------------------------------------------------------------------
# R subsolution and gradient chain bound


@dataclass
class EmpiricalConstant:
    value: float
    evaluated: int
    excluded: int
    skipped: int = 0
    worst_point: tuple | None = None

    @property
    def excluded_fraction(self) -> float:
        total = self.evaluated + self.excluded + self.skipped
        return self.excluded / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "evaluated": self.evaluated,
            "excluded": self.excluded,
            "skipped": self.skipped,
        }


def _check_excluded(excluded: int, total: int, what: str):
    if total and excluded / total > MAX_EXCLUDED_FRACTION:
        raise UnreliableSampleError(
            f"{what}: {excluded} of {total} points straddle eigenvalue crossings"
        )


def r_subsolution_constant(
    F: OperatorF, u: ScalarField, ell: int, eps: float, gap_tol: float | None = None
) -> EmpiricalConstant:
    """Largest ``F^{ab} R_{ab} / R`` over admissible interior points.

    ``R = sum_{k <= ell} (Q_k + eps)^(1/2)`` is built from the Hessian
    spectrum; its Hessian is a centred difference, and points whose stencil
    crosses an eigenvalue crossing are excluded.
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    eig = eigen_field(u)
    R = eig.r_field(ell, eps)
    target = eig.grid.shrink(margin_for_order(2, u.grid.dim))
    R_hess = derivative_tensor(R, 2, target)
    A, p, vals, x, _ = solution_state(u, target)
    FA = F.slots(A, p, vals, x).FA
    ratio = np.einsum("pab,pab->p", FA, R_hess) / R.values[target.rows_in(R.grid)]
    bad = crossing_mask(eig, target, stencil_offsets(2, u.grid.dim), gap_tol)
    _check_excluded(int(bad.sum()), len(target), "R subsolution")
    good = ~bad
    worst = int(np.flatnonzero(good)[np.argmax(ratio[good])])
    return EmpiricalConstant(float(ratio[worst]), int(good.sum()), int(bad.sum()), 0, tuple(target.points[worst]))


def _chain_sides(u: ScalarField, ell: int, eps: float):
    """Both sides of the chain bound at every point of the gradient grid."""
    if not eps > 0:
        raise ParameterError("eps must be positive")
    eig = eigen_field(u)
    n = eig.dim
    target = eig.grid.shrink(margin_for_order(1, n))
    rows = target.rows_in(eig.grid)
    dlam = [np.linalg.norm(derivative_tensor(eig.lambda_field(i), 1, target), axis=1) for i in range(1, n + 1)]
    lhs = np.zeros(len(target))
    rhs = np.zeros(len(target))
    for k in range(1, ell + 1):
        Qk = eig.q_field(k)
        weight = 1.0 / np.sqrt(np.maximum(Qk.values[rows], 0.0) + eps)
        lhs += weight * sum(dlam[:k])
        rhs += weight * np.linalg.norm(derivative_tensor(Qk, 1, target), axis=1)
    return eig, target, lhs, rhs


def gradient_chain_bound(
    u: ScalarField, ell: int, eps: float, gap_tol: float | None = None, tiny: float | None = None
) -> EmpiricalConstant:
    """Largest ratio of the two sides of the eigenvalue gradient chain bound.

    LHS ``sum_k (Q_k + eps)^(-1/2) sum_{i <= k} |D lambda_i|`` and RHS
    ``sum_k (Q_k + eps)^(-1/2) |D Q_k|``, both from centred differences of the
    eigenvalue fields.  Points where both sides are below ``tiny`` are
    skipped; a point with RHS below ``tiny`` but LHS above it raises.  The
    default ``tiny`` is :func:`roundoff_floor` of ``u``.
    """
    tiny = roundoff_floor(u) if tiny is None else tiny
    eig, target, lhs, rhs = _chain_sides(u, ell, eps)
    bad = crossing_mask(eig, target, stencil_offsets(1, eig.dim), gap_tol)
    _check_excluded(int(bad.sum()), len(target), "gradient chain")
    small = rhs <= tiny
    flagged = small & (lhs > tiny) & ~bad
    if flagged.any():
        row = int(np.argmax(flagged))
        raise InconsistencyError(
            f"gradient chain bound: LHS {lhs[row]:.3e} with vanishing RHS at {tuple(target.points[row])}"
        )
    good = ~bad & ~small
    skipped = int((small & ~bad).sum())
    if not good.any():
        return EmpiricalConstant(0.0, 0, int(bad.sum()), skipped)
    ratio = np.where(good, lhs / np.where(good, rhs, 1.0), -np.inf)
    worst = int(np.argmax(ratio))
    return EmpiricalConstant(float(ratio[worst]), int(good.sum()), int(bad.sum()), skipped, tuple(target.points[worst]))


def chain_ratios(u: ScalarField, ell: int, eps: float, tiny: float | None = None) -> np.ndarray:
    """Per-point LHS/RHS of the chain bound (NaN where undefined), for diagnostics."""
    tiny = roundoff_floor(u) if tiny is None else tiny
    _, _, lhs, rhs = _chain_sides(u, ell, eps)
    defined = rhs > tiny
    return np.where(defined, lhs / np.where(defined, rhs, 1.0), np.nan)


# ---------------------------------------------------------------------------
# weak Harnack check


def _coefficient(value, grid: Grid, shape: tuple) -> np.ndarray:
    """Broadcast a constant, a per-point array or a vectorized callable to ``grid``."""
    if callable(value):
        arr = np.asarray(value(np.asarray(grid.points)), dtype=float)
    elif isinstance(value, ScalarField):
        arr = value.restrict(grid).values
    else:
        arr = np.asarray(value, dtype=float)
    return np.broadcast_to(arr, (len(grid),) + shape) if arr.shape != (len(grid),) + shape else arr


@dataclass
class WeakHarnackReport:
    C_emp: float
    lq_average: float
    infimum: float
    f_norm: float
    Lambda: float
    subsolution_fraction: float
    mollified: dict  # eps -> C_emp
    max_change: float

    @property
    def stable(self) -> bool:
        return self.max_change <= 0.1

    def to_dict(self) -> dict:
        return {
            "C_emp": self.C_emp,
            "lq_average": self.lq_average,
            "infimum": self.infimum,
            "f_norm": self.f_norm,
            "Lambda": self.Lambda,
            "subsolution_fraction": self.subsolution_fraction,
            "mollified": {repr(k): v for k, v in self.mollified.items()},
            "max_change": self.max_change,
        }


def _c_emp(v: ScalarField, f, region: Region, q: float):
    avg = integrate_lq(v, region, q)
    inf = float(v.values[region.mask(v.grid)].min())
    fvals = np.abs(_coefficient(f, v.grid, ()))
    f_norm = integrate_lq(ScalarField(v.grid, fvals, "f"), region, v.grid.dim)
    denom = inf + f_norm
    return (avg / denom if denom > 0 else np.inf), avg, inf, f_norm


def weak_harnack_check(
    a,
    b,
    c,
    v: ScalarField,
    f,
    region: Region | None = None,
    q: float = 0.5,
    tol: float = 1e-8,
    mollify_factors: tuple = (2, 4),
    min_fraction: float = 0.99,
) -> WeakHarnackReport:
    """Empirical weak Harnack constant for ``L v = a^{ij} v_ij + b^i v_i + c v <= f``.

    Coefficients may be constants, arrays aligned with ``v.grid`` or
    vectorized callables of the coordinates.  The subsolution inequality is
    checked first (``<= f + tol`` on at least ``min_fraction`` of interior
    points); then ``C_emp = ||v||_{L^q avg} / (inf v + ||f||_{L^n avg})`` is
    measured on ``region`` and re-measured after mollifying ``v`` at radii
    ``mollify_factors * h``.
    """
    grid = v.grid
    n = grid.dim
    h = grid.spacing
    region = region or Region.ball(n)
    if np.any(v.values < 0):
        raise DomainError("v must be nonnegative")
    inner = grid.shrink(margin_for_order(2, n))
    A = _coefficient(a, inner, (n, n))
    eigs = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
    if np.any(eigs[:, 0] <= 0):
        row = int(np.argmin(eigs[:, 0]))
        raise EllipticityError(f"a is not elliptic at {tuple(inner.points[row])}", tuple(inner.points[row]))
    Lam = float(max(eigs[:, -1].max(), 1.0 / eigs[:, 0].min()))

    D2 = derivative_tensor(v, 2, inner)
    D1 = derivative_tensor(v, 1, inner)
    Lv = (
        np.einsum("pij,pij->p", A, D2)
        + np.einsum("pi,pi->p", _coefficient(b, inner, (n,)), D1)
        + _coefficient(c, inner, ()) * v.restrict(inner).values
    )
    excess = Lv - _coefficient(f, inner, ())
    ok = excess <= tol
    frac = float(ok.mean())
    if frac < min_fraction:
        row = int(np.argmax(excess))
        pt = tuple(inner.points[row])
        raise NotASubsolutionError(
            f"L v - f = {excess[row]:.3e} > {tol:.1e} at {pt}; only {frac:.1%} of points satisfy L v <= f", pt
        )

    C, avg, inf, f_norm = _c_emp(v, f, region, q)
    moll = {}
    for k in mollify_factors:
        vm = mollify(v, k * h)
        moll[k * h] = _c_emp(vm, f, region, q)[0]
    change = max((abs(cm - C) / C for cm in moll.values()), default=0.0) if np.isfinite(C) and C > 0 else np.inf
    return WeakHarnackReport(float(C), avg, inf, f_norm, Lam, frac, moll, float(change))


def laplacian_subsolution_check(v: ScalarField, f=0.0, region: Region | None = None, q: float = 0.5, **kw):
    """Shortcut for ``L = Delta``."""
    n = v.grid.dim
    return weak_harnack_check(np.eye(n), np.zeros(n), 0.0, v, f, region, q, **kw)


def eps_schedule_constants(F: OperatorF, u: ScalarField, ell: int, schedule) -> dict:
    """``r_subsolution_constant`` over a sequence of eps values."""
    return {eps: r_subsolution_constant(F, u, ell, eps) for eps in schedule}


def affine_shift(u: ScalarField, slope, offset: float = 0.0) -> ScalarField:
    """``u + <slope, x> + offset``; the Hessian is unchanged."""
    return ScalarField(u.grid, u.values + np.asarray(u.grid.points) @ np.asarray(slope, dtype=float) + offset, u.name)

