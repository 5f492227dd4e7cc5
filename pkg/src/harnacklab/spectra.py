"""Hessian spectra: sorted eigenvalues, eigenvalue sums, multiplicity blocks,
first/second variation checks and semi-concavity sampling.

Vectorized helpers work on stacks of matrices with shape ``(..., n, n)``; the
single-matrix functions are thin wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import (
    AlignmentError,
    ConvexityError,
    DeclarationError,
    DegenerateGapError,
    NumericError,
    ParameterError,
    SingularGapError,
    SymmetryError,
)
from .field import (
    PAD,
    Grid,
    ScalarField,
    axes_to_orders,
    derivative_tensor,
    derivative_tensor_at,
    margin_for_order,
    stencil,
    stencil_offsets,
)

MAX_DIM = 16
AMBIGUITY_FACTOR = 10.0
SINGULAR_GAP = 1e-12


@dataclass(frozen=True, eq=False)
class EigenSystem:
    dim: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns match eigenvalue order

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _check_symmetric(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise SymmetryError(f"expected square matrices, got shape {A.shape}")
    if A.shape[-1] > MAX_DIM:
        raise ParameterError(f"matrix dimension {A.shape[-1]} exceeds {MAX_DIM}")
    if not np.all(np.isfinite(A)):
        raise NumericError("matrix has non-finite entries")
    scale = np.maximum(1.0, np.abs(A).max(axis=(-2, -1)))
    asym = np.abs(A - np.swapaxes(A, -1, -2)).max(axis=(-2, -1))
    if np.any(asym > 1e-12 * scale):
        raise SymmetryError(f"matrix is not symmetric (defect {float(np.max(asym)):.3e})")
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def eigh_stack(A: np.ndarray):
    """Ascending eigenvalues and eigenvectors of a stack of symmetric matrices."""
    A = _check_symmetric(A)
    try:
        return np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc


def eigensystem(A) -> EigenSystem:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise SymmetryError(f"expected a single square matrix, got shape {A.shape}")
    lam, vec = eigh_stack(A)
    return EigenSystem(A.shape[0], lam, vec)


def _check_k(k: int, n: int):
    if not (1 <= k <= n):
        raise IndexError(f"k={k} out of range 1..{n}")


def sigma_values(lam: np.ndarray, k: int) -> np.ndarray:
    """Sum of the ``k`` smallest of ascending eigenvalues along the last axis."""
    _check_k(k, lam.shape[-1])
    return lam[..., :k].sum(axis=-1)


def q_values(lam: np.ndarray, k: int) -> np.ndarray:
    """``Q_k = sum_{m<=k} sum_{a<=m} lambda_a`` for ascending eigenvalues."""
    _check_k(k, lam.shape[-1])
    return np.cumsum(lam[..., :k], axis=-1).sum(axis=-1)


def q_values_weighted(lam: np.ndarray, k: int) -> np.ndarray:
    """Same quantity written as ``lambda_k + 2 lambda_{k-1} + ... + k lambda_1``."""
    _check_k(k, lam.shape[-1])
    weights = np.arange(k, 0, -1, dtype=float)
    return lam[..., :k] @ weights


def r_values(lam: np.ndarray, ell: int, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    _check_k(ell, lam.shape[-1])
    q = np.stack([q_values(lam, k) for k in range(1, ell + 1)], axis=-1)
    if np.any(q < -1e-8):
        raise ConvexityError(f"Q_k = {float(q.min()):.3e} is negative")
    return np.sqrt(np.maximum(q, 0.0) + eps).sum(axis=-1)


def sigma_k(A, k: int) -> float:
    return float(sigma_values(eigensystem(A).eigenvalues, k))


def q_weight(A, k: int) -> float:
    return float(q_values(eigensystem(A).eigenvalues, k))


def r_quantity(A, ell: int, eps: float) -> float:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    return float(r_values(eigensystem(A).eigenvalues, ell, eps))


def default_gap_tol(lam: np.ndarray) -> np.ndarray | float:
    """``1e-6 * max(1, lambda_max)`` per eigenvalue list."""
    out = 1e-6 * np.maximum(1.0, np.abs(lam).max(axis=-1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class BlockStructure:
    """Multiplicity blocks of an ascending eigenvalue list.

    ``breakpoints`` are the 1-based block ends ``mu_1 < ... < mu_N = n``.
    """

    breakpoints: tuple
    gap_tol: float

    @property
    def n_blocks(self) -> int:
        return len(self.breakpoints)

    def blocks(self) -> list:
        """1-based inclusive ``(start, end)`` pairs."""
        starts = (0,) + self.breakpoints[:-1]
        return [(s + 1, e) for s, e in zip(starts, self.breakpoints)]

    def rho(self, m: int) -> int:
        """Largest index in the block containing ``m`` (1-based)."""
        _check_k(m, self.breakpoints[-1])
        for end in self.breakpoints:
            if end >= m:
                return end
        raise AssertionError("unreachable")

    def block_of(self, m: int) -> int:
        """1-based block number containing index ``m``."""
        for j, end in enumerate(self.breakpoints, start=1):
            if end >= m:
                return j
        raise IndexError(m)


def block_structure(sys, gap_tol: float | None = None) -> BlockStructure:
    lam = sys.eigenvalues if isinstance(sys, EigenSystem) else np.asarray(sys, dtype=float)
    if gap_tol is None:
        gap_tol = default_gap_tol(lam)
    if not gap_tol > 0:
        raise ParameterError("gap_tol must be positive")
    gaps = np.diff(lam)
    ends = [i + 1 for i, g in enumerate(gaps) if g > gap_tol] + [len(lam)]
    return BlockStructure(tuple(ends), float(gap_tol))


def block_ids(lam: np.ndarray, gap_tol) -> np.ndarray:
    """0-based block number of every eigenvalue, vectorized over leading axes."""
    gaps = np.diff(lam, axis=-1)
    breaks = gaps > np.asarray(gap_tol)[..., None]
    zero = np.zeros(lam.shape[:-1] + (1,), dtype=int)
    return np.concatenate([zero, np.cumsum(breaks, axis=-1)], axis=-1)


def ambiguous_gaps(lam: np.ndarray, gap_tol) -> np.ndarray:
    """True where some consecutive gap lies in ``(gap_tol, 10 gap_tol)``."""
    gaps = np.diff(lam, axis=-1)
    tol = np.asarray(gap_tol)[..., None]
    return np.any((gaps > tol) & (gaps < AMBIGUITY_FACTOR * tol), axis=-1)


# ---------------------------------------------------------------------------
# eigenvalue fields


@dataclass(frozen=True, eq=False)
class EigenField:
    """Per-point sorted Hessian spectrum of ``source`` on a shrunk grid."""

    grid: Grid
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    hessian: np.ndarray
    source: ScalarField
    convex: bool = False

    def __post_init__(self):
        if self.convex:
            lam = self.eigenvalues
            tol = 1e-8 * np.maximum(1.0, lam[:, -1])
            if np.any(lam[:, 0] < -tol):
                row = int(np.argmin(lam[:, 0] + tol))
                raise ConvexityError(
                    f"Hessian eigenvalue {lam[row, 0]:.3e} < 0 at {tuple(self.grid.points[row])}"
                )

    @property
    def dim(self) -> int:
        return self.grid.dim

    @cached_property
    def global_max(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    def lambda_field(self, i: int) -> ScalarField:
        """Field of the ``i``-th smallest eigenvalue (1-based)."""
        _check_k(i, self.dim)
        return ScalarField(self.grid, self.eigenvalues[:, i - 1], f"lambda_{i}")

    def sigma_field(self, k: int) -> ScalarField:
        return ScalarField(self.grid, sigma_values(self.eigenvalues, k), f"sigma_{k}")

    def q_field(self, k: int) -> ScalarField:
        return ScalarField(self.grid, q_values(self.eigenvalues, k), f"Q_{k}")

    def r_field(self, ell: int, eps: float) -> ScalarField:
        return ScalarField(self.grid, r_values(self.eigenvalues, ell, eps), f"R_{ell}")

    def restrict(self, grid: Grid) -> "EigenField":
        rows = grid.rows_in(self.grid)
        return EigenField(
            grid, self.eigenvalues[rows], self.eigenvectors[rows], self.hessian[rows], self.source, self.convex
        )


def hessian_grid(u: ScalarField) -> Grid:
    return u.grid.shrink(margin_for_order(2, u.grid.dim))


def eigen_field(u: ScalarField, convex: bool = False) -> EigenField:
    """Eigen-decompose the finite-difference Hessian of ``u`` at interior points."""
    grid = hessian_grid(u)
    hess = derivative_tensor(u, 2, grid)
    lam, vec = eigh_stack(hess)
    return EigenField(grid, lam, vec, hess, u, convex)


def crossing_mask(eig: EigenField, target: Grid, offsets, gap_tol=None) -> np.ndarray:
    """Flag target points whose stencil straddles an eigenvalue crossing.

    Each neighbour's eigenvectors are matched to the centre's multiplicity
    blocks by squared overlap.  If the matched block numbers are not
    nondecreasing in the neighbour's sorted order, two branches that were
    separated by more than ``gap_tol`` at the centre have swapped order
    across the stencil.
    """
    n = eig.dim
    rows = target.rows_in(eig.grid)
    lam_c = eig.eigenvalues[rows]
    vec_c = eig.eigenvectors[rows]
    tol = default_gap_tol(lam_c) if gap_tol is None else np.full(len(rows), gap_tol)
    bid = block_ids(lam_c, tol)
    onehot = (bid[:, None, :] == np.arange(n)[None, :, None]).astype(float)  # (p, block, i)
    vec_box = eig.grid.to_box(eig.eigenvectors)
    base = target.index + eig.grid.steps + PAD
    flagged = np.zeros(len(rows), dtype=bool)
    for off in offsets:
        if not any(off):
            continue
        vec_n = vec_box[tuple((base + np.asarray(off)).T)]
        if np.isnan(vec_n).any():
            raise ValueError(f"stencil offset {off} leaves the eigenvalue grid")
        overlap = np.einsum("pki,pkj->pij", vec_c, vec_n) ** 2
        weight = onehot @ overlap  # (p, block, j)
        assigned = weight.argmax(axis=1)
        flagged |= np.any(np.diff(assigned, axis=-1) < 0, axis=-1)
    return flagged


# ---------------------------------------------------------------------------
# first and second variation of eigenvalues


def _gap_status(lam: np.ndarray, gap_tol) -> None:
    if ambiguous_gaps(lam[None], np.atleast_1d(gap_tol))[0]:
        raise DegenerateGapError(
            f"eigenvalue gap inside the ambiguity zone [{gap_tol:.3e}, {AMBIGUITY_FACTOR * gap_tol:.3e}]"
        )


def first_variation_residuals(lam, vec, third, dlam, gap_tol) -> np.ndarray:
    """Blockwise residual of ``u_{kli} - (D lambda_block)_i delta_kl`` in the eigenframe.

    All arguments are stacked over points: ``lam (p,n)``, ``vec (p,n,n)``,
    ``third (p,n,n,n)``, ``dlam (p,n,n)`` with ``dlam[:, i]`` the gradient of
    the ``i``-th sorted eigenvalue field.
    """
    n = lam.shape[-1]
    bid = block_ids(lam, gap_tol)
    first = np.empty_like(bid)
    for i in range(n):
        # index of the first member of i's block
        first[:, i] = np.argmax(bid == bid[:, i : i + 1], axis=1)
    rot = np.einsum("pabc,pak,pbl,pci->pkli", third, vec, vec, vec)
    grad = np.einsum("pjc,pci->pji", dlam, vec)  # rotated gradients of each lambda_j
    block_grad = np.take_along_axis(grad, first[:, :, None], axis=1)  # (p, k, i)
    eye = np.eye(n)
    expected = eye[None, :, :, None] * block_grad[:, :, None, :]
    same = (bid[:, :, None] == bid[:, None, :])[..., None]
    return np.where(same, np.abs(rot - expected), 0.0).max(axis=(1, 2, 3))


def second_variation_defects(lam, vec, third, fourth, sigma_hess, m: int, gap_tol) -> np.ndarray:
    """Smallest eigenvalue of RHS - LHS for the second variation inequality.

    ``sigma_hess (p,n,n)`` is the finite-difference Hessian of the field
    ``lambda_1 + ... + lambda_m``.  Raises ``SingularGapError`` when an
    included denominator ``lambda_a - lambda_q`` is below 1e-12.
    """
    n = lam.shape[-1]
    _check_k(m, n)
    bid = block_ids(lam, gap_tol)
    above = bid > bid[:, m - 1 : m]  # q > rho(m)
    T = np.einsum("pabc,pak,pbl,pcr->pklr", third, vec, vec, vec)
    U = np.einsum("pabcd,pak,pbl,pcr,pds->pklrs", fourth, vec, vec, vec, vec)
    L = np.einsum("pab,par,pbs->prs", sigma_hess, vec, vec)
    alpha = np.arange(m)
    rhs = U[:, alpha, alpha].sum(axis=1)
    denom = lam[:, None, :m] - lam[:, :, None]  # (p, q, alpha)
    inc = above[:, :, None] & np.ones((1, 1, m), dtype=bool)
    if np.any(inc & (np.abs(denom) < SINGULAR_GAP)):
        raise SingularGapError("eigenvalue gap below 1e-12 in the second variation denominator")
    coef = np.where(inc, 1.0 / np.where(inc, denom, 1.0), 0.0)
    Tq = T[:, :, :m, :]  # (p, q, alpha, a)
    rhs = rhs + 2.0 * np.einsum("pqa,pqar,pqas->prs", coef, Tq, Tq)
    diff = rhs - L
    diff = 0.5 * (diff + np.swapaxes(diff, -1, -2))
    return np.linalg.eigvalsh(diff)[:, 0]


def _shift(base: tuple, off) -> tuple:
    return tuple(b + o for b, o in zip(base, off))


def first_variation_residual(u: ScalarField, point, gap_tol: float | None = None) -> float:
    """Residual of ``u_{kli} = (lambda_{block})_i delta_kl`` at one grid point.

    Third derivatives are rotated into the Hessian eigenframe and compared,
    block by block, with the centred-difference gradient of the sorted
    eigenvalue field of the block's first member.
    """
    grid = u.grid
    dim = grid.dim
    base = grid.lattice_index(point)
    lam0, vec0 = eigh_stack(derivative_tensor_at(u, base, 2))
    if gap_tol is None:
        gap_tol = default_gap_tol(lam0)
    _gap_status(lam0, gap_tol)
    third = derivative_tensor_at(u, base, 3)
    dlam = np.empty((dim, dim))
    for c, e in enumerate(np.eye(dim, dtype=int)):
        plus = eigh_stack(derivative_tensor_at(u, _shift(base, e), 2))[0]
        minus = eigh_stack(derivative_tensor_at(u, _shift(base, -e), 2))[0]
        dlam[:, c] = (plus - minus) / (2 * grid.spacing)
    res = first_variation_residuals(lam0[None], vec0[None], third[None], dlam[None], np.array([gap_tol]))
    return float(res[0])


def second_variation_defect(u: ScalarField, point, m: int, gap_tol: float | None = None) -> float:
    """Smallest eigenvalue of RHS - LHS of the second variation inequality at one point.

    LHS is the Hessian of ``lambda_1 + ... + lambda_m`` by finite differences
    of the sorted eigenvalue field; RHS is built from fourth and third
    derivatives of ``u`` in the eigenframe.  The value should be
    ``>= -O(h^2)``, and ``O(h^2)`` in size when ``m`` ends its block.
    """
    grid = u.grid
    dim = grid.dim
    base = grid.lattice_index(point)
    lam0, vec0 = eigh_stack(derivative_tensor_at(u, base, 2))
    _check_k(m, dim)
    if gap_tol is None:
        gap_tol = default_gap_tol(lam0)
    _gap_status(lam0, gap_tol)
    cache = {}

    def sigma_at(off):
        if off not in cache:
            cache[off] = float(eigh_stack(derivative_tensor_at(u, _shift(base, off), 2))[0][:m].sum())
        return cache[off]

    h = grid.spacing
    sig_hess = np.empty((dim, dim))
    for a in range(dim):
        for b in range(a, dim):
            orders = axes_to_orders((a, b), dim)
            val = sum(w * sigma_at(off) for off, w in stencil(orders)) / h**2
            sig_hess[a, b] = sig_hess[b, a] = val
    out = second_variation_defects(
        lam0[None],
        vec0[None],
        derivative_tensor_at(u, base, 3)[None],
        derivative_tensor_at(u, base, 4)[None],
        sig_hess[None],
        m,
        np.array([gap_tol]),
    )
    return float(out[0])


@dataclass(frozen=True)
class DefectSweep:
    """Second variation defects over every admissible point of a field."""

    grid: Grid
    defects: np.ndarray  # NaN at excluded points
    excluded: np.ndarray

    @property
    def min_defect(self) -> float:
        return float(np.nanmin(self.defects))

    @property
    def max_abs_defect(self) -> float:
        return float(np.nanmax(np.abs(self.defects)))


def second_variation_defect_field(u: ScalarField, m: int, gap_tol: float | None = None) -> DefectSweep:
    """Vectorized :func:`second_variation_defect` on the largest admissible grid.

    Points are admissible when the fourth-derivative stencil of ``u`` and the
    Hessian stencil of the ``sigma_m`` field both fit.  Points with an
    ambiguous gap or whose stencil straddles an eigenvalue crossing are
    excluded and carry NaN.
    """
    dim = u.grid.dim
    _check_k(m, dim)
    eig = eigen_field(u)
    margin = max(margin_for_order(4, dim), 2 * margin_for_order(2, dim))
    target = u.grid.shrink(margin)
    rows = target.rows_in(eig.grid)
    lam, vec = eig.eigenvalues[rows], eig.eigenvectors[rows]
    tol = default_gap_tol(lam) if gap_tol is None else np.full(len(rows), gap_tol)
    excluded = ambiguous_gaps(lam, tol) | crossing_mask(eig, target, stencil_offsets(2, dim), gap_tol)
    keep = ~excluded
    sig_hess = derivative_tensor(eig.sigma_field(m), 2, target)
    defects = np.full(len(rows), np.nan)
    if keep.any():
        defects[keep] = second_variation_defects(
            lam[keep],
            vec[keep],
            derivative_tensor(u, 3, target)[keep],
            derivative_tensor(u, 4, target)[keep],
            sig_hess[keep],
            m,
            tol[keep],
        )
    return DefectSweep(target, defects, excluded)


# ---------------------------------------------------------------------------
# semi-concavity


def midpoint_defect(f, x, y) -> float:
    """``(f(x) + f(y))/2 - f((x+y)/2)``.

    ``f`` is either a ScalarField (then x, y and the midpoint must be grid
    points) or a callable on coordinates.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(f, ScalarField):
        g = f.grid
        ix = np.asarray(g.lattice_index(x))
        iy = np.asarray(g.lattice_index(y))
        if np.any((ix + iy) % 2):
            raise AlignmentError(f"midpoint of {tuple(x)} and {tuple(y)} is off the grid")
        mid = (ix + iy) // 2 * g.spacing
        return 0.5 * (f.at(x) + f.at(y)) - f.at(mid)
    return 0.5 * (float(f(x)) + float(f(y))) - float(f(0.5 * (x + y)))


def sample_midpoint_pairs(grid: Grid, n_pairs: int, rng: np.random.Generator):
    """Random row pairs ``(i, j, mid)`` with an on-grid midpoint and ``i != j``."""
    idx = grid.index
    lookup = grid._rows
    out_i, out_j, out_m = [], [], []
    attempts = 0
    while len(out_i) < n_pairs and attempts < 50 * n_pairs:
        attempts += 1
        i, j = rng.integers(len(grid), size=2)
        if i == j:
            continue
        s = idx[i] + idx[j]
        if np.any(s % 2):
            # nudge j onto the parity class of i
            cand = idx[j] + (s % 2)
            key = tuple(int(v) for v in cand)
            if key not in lookup:
                continue
            j = lookup[key]
            s = idx[i] + idx[j]
            if i == j:
                continue
        out_i.append(i)
        out_j.append(j)
        out_m.append(lookup[tuple(int(v) for v in s // 2)])
    return np.array(out_i), np.array(out_j), np.array(out_m)


def semiconcavity_profile(f: ScalarField, pairs) -> np.ndarray:
    """Midpoint defect divided by ``|x - y|^2`` for each sampled pair."""
    i, j, mid = pairs
    v = f.values
    defect = 0.5 * (v[i] + v[j]) - v[mid]
    dist2 = ((f.grid.points[i] - f.grid.points[j]) ** 2).sum(axis=1)
    return defect / dist2


def semiconcavity_constant(f: ScalarField, n_pairs: int = 10_000, seed: int = 0) -> float:
    pairs = sample_midpoint_pairs(f.grid, n_pairs, np.random.default_rng(seed))
    return float(semiconcavity_profile(f, pairs).max())


@dataclass
class CompositionReport:
    constant_f: float
    constant_composed: float
    lipschitz: float
    bound: float
    holds: bool
    n_pairs: int
    notes: list = field(default_factory=list)


def compose_semiconcave_check(
    f: ScalarField,
    h: Callable[[np.ndarray], np.ndarray],
    lipschitz: float,
    n_pairs: int = 10_000,
    seed: int = 0,
    tol: float = 1e-10,
) -> CompositionReport:
    """Empirical semi-concavity constants of ``f`` and ``h o f``.

    ``h`` must be increasing, concave and ``lipschitz``-Lipschitz on the range
    of ``f``; these declarations are spot-checked on random triples before
    anything else.
    """
    rng = np.random.default_rng(seed)
    lo, hi = float(f.values.min()), float(f.values.max())
    if hi == lo:
        hi = lo + 1.0
    a = rng.uniform(lo, hi, size=2000)
    b = rng.uniform(lo, hi, size=2000)
    a, b = np.minimum(a, b), np.maximum(a, b)
    ha, hb, hm = h(a), h(b), h(0.5 * (a + b))
    scale = 1.0 + np.abs(ha) + np.abs(hb)
    if np.any(hb < ha - tol * scale):
        raise DeclarationError("h is not increasing on the range of f")
    if np.any(hm < 0.5 * (ha + hb) - tol * scale):
        raise DeclarationError("h is not concave on the range of f")
    if np.any(np.abs(hb - ha) > lipschitz * (b - a) * (1 + 1e-9) + tol * scale):
        raise DeclarationError(f"h is not {lipschitz}-Lipschitz on the range of f")

    pairs = sample_midpoint_pairs(f.grid, n_pairs, rng)
    const_f = float(semiconcavity_profile(f, pairs).max())
    composed = ScalarField(f.grid, h(f.values), f"h({f.name})")
    const_hf = float(semiconcavity_profile(composed, pairs).max())
    bound = lipschitz * max(const_f, 0.0)
    holds = const_hf <= bound + tol * (1 + abs(bound))
    return CompositionReport(const_f, const_hf, lipschitz, bound, holds, len(pairs[0]))
