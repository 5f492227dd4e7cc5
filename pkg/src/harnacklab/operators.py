"""Fully nonlinear operators ``F(A, p, u, x)`` and their derivative slots.

Derivatives with respect to the symmetric matrix argument follow the usual
symmetric convention: ``F^{ij}`` is the derivative along ``(E_ij + E_ji)/2``,
so ``F = tr A`` has ``F^{ij} = delta_ij`` and ``F = log det A`` has
``F^{ij} = (A^{-1})_{ij}``.

Every operator callback must broadcast over leading batch axes: ``A`` has
shape ``(..., n, n)``, ``p`` and ``x`` ``(..., n)`` and ``u`` ``(...)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DefinitenessError, EllipticityError
from .field import ScalarField, derivative_tensor, derivative_tensor_at
from .spectra import hessian_grid

SLOT_NAMES = (
    "FA", "Fp", "Fu", "Fx",
    "FAA", "FAp", "FAu", "FAx", "Fpp", "Fpu", "Fpx", "Fuu", "Fux", "Fxx",
)  # fmt: skip
SECOND_SLOTS = ("FAA", "FAp", "FAu", "FAx", "Fpp", "Fpu", "Fpx", "Fuu", "Fux", "Fxx")


@dataclass
class Slots:
    """Value and first/second partial derivatives of ``F`` at a batch of states.

    Shapes with batch shape ``B``: ``FA (B,n,n)``, ``Fp, Fx (B,n)``,
    ``Fu (B)``, ``FAA (B,n,n,n,n)``, ``FAp, FAx (B,n,n,n)``, ``FAu (B,n,n)``,
    ``Fpp, Fpx (B,n,n)`` (``Fpx[a, b]`` is ``F^{p_a, x_b}``), ``Fpu, Fux (B,n)``,
    ``Fuu (B)``, ``Fxx (B,n,n)``.
    """

    value: np.ndarray
    FA: np.ndarray
    Fp: np.ndarray
    Fu: np.ndarray
    Fx: np.ndarray
    FAA: np.ndarray
    FAp: np.ndarray
    FAu: np.ndarray
    FAx: np.ndarray
    Fpp: np.ndarray
    Fpu: np.ndarray
    Fpx: np.ndarray
    Fuu: np.ndarray
    Fux: np.ndarray
    Fxx: np.ndarray

    @classmethod
    def zeros(cls, batch: tuple, n: int) -> "Slots":
        shapes = {
            "value": (), "FA": (n, n), "Fp": (n,), "Fu": (), "Fx": (n,),
            "FAA": (n, n, n, n), "FAp": (n, n, n), "FAu": (n, n), "FAx": (n, n, n),
            "Fpp": (n, n), "Fpu": (n,), "Fpx": (n, n), "Fuu": (), "Fux": (n,), "Fxx": (n, n),
        }  # fmt: skip
        return cls(**{k: np.zeros(batch + s) for k, s in shapes.items()})

    def second_norm(self) -> np.ndarray:
        """Frobenius size of all second-derivative slots, per batch entry."""
        total = 0.0
        for name in SECOND_SLOTS:
            arr = getattr(self, name)
            axes = tuple(range(self.value.ndim, arr.ndim))
            total = total + (arr**2).sum(axis=axes) if axes else total + arr**2
        return np.sqrt(total)


def _batch_state(A, p, u, x, n):
    A = np.asarray(A, dtype=float)
    batch = A.shape[:-2]
    p = np.broadcast_to(np.asarray(p, dtype=float), batch + (n,))
    u = np.broadcast_to(np.asarray(u, dtype=float), batch)
    x = np.broadcast_to(np.asarray(x, dtype=float), batch + (n,))
    return A, p, u, x


class OperatorF:
    """A fully nonlinear operator with closed-form or finite-difference slots.

    ``func(A, p, u, x)`` evaluates ``F``.  ``slot_func`` (optional) returns a
    :class:`Slots` in closed form; without it every slot is computed by
    central differences with step ``fd_step * max(1, |state entry|)``.
    """

    def __init__(self, name: str, dim: int, func: Callable, slot_func: Callable | None = None, fd_step: float = 1e-4):
        self.name = name
        self.dim = int(dim)
        self.func = func
        self.slot_func = slot_func
        self.fd_step = fd_step

    def __repr__(self):
        return f"OperatorF({self.name!r}, dim={self.dim})"

    def __call__(self, A, p, u, x):
        A, p, u, x = _batch_state(A, p, u, x, self.dim)
        return self.func(A, p, u, x)

    def slots(self, A, p, u, x) -> Slots:
        A, p, u, x = _batch_state(A, p, u, x, self.dim)
        if self.slot_func is None:
            return self.fd_slots(A, p, u, x)
        return self.slot_func(A, p, u, x)

    def fd_slots(self, A, p, u, x) -> Slots:
        """All slots by central differences on the flattened state ``(A, p, u, x)``."""
        n = self.dim
        A, p, u, x = _batch_state(A, p, u, x, n)
        batch = A.shape[:-2]
        w0 = np.concatenate([A.reshape(batch + (n * n,)), p, u[..., None], x], axis=-1)
        L = w0.shape[-1]
        step = self.fd_step * np.maximum(1.0, np.abs(w0))

        def ev(w):
            Aw = w[..., : n * n].reshape(batch + (n, n))
            Aw = 0.5 * (Aw + np.swapaxes(Aw, -1, -2))
            return self.func(Aw, w[..., n * n : n * n + n], w[..., n * n + n], w[..., n * n + n + 1 :])

        f0 = ev(w0)
        grad = np.empty(batch + (L,))
        hess = np.empty(batch + (L, L))
        basis = np.eye(L)
        shifted = {}
        for j in range(L):
            dj = step[..., j : j + 1] * basis[j]
            fp, fm = ev(w0 + dj), ev(w0 - dj)
            shifted[j] = (fp, fm)
            grad[..., j] = (fp - fm) / (2 * step[..., j])
            hess[..., j, j] = (fp - 2 * f0 + fm) / step[..., j] ** 2
        for j in range(L):
            dj = step[..., j : j + 1] * basis[j]
            for k in range(j + 1, L):
                dk = step[..., k : k + 1] * basis[k]
                val = (ev(w0 + dj + dk) - ev(w0 + dj - dk) - ev(w0 - dj + dk) + ev(w0 - dj - dk)) / (
                    4 * step[..., j] * step[..., k]
                )
                hess[..., j, k] = hess[..., k, j] = val

        iA = slice(0, n * n)
        ip = slice(n * n, n * n + n)
        iu = n * n + n
        ix = slice(n * n + n + 1, L)

        def blk(r, c, shape):
            return hess[(Ellipsis, r, c)].reshape(batch + shape)

        return Slots(
            value=f0,
            FA=grad[..., iA].reshape(batch + (n, n)),
            Fp=grad[..., ip],
            Fu=grad[..., iu],
            Fx=grad[..., ix],
            FAA=blk(iA, iA, (n, n, n, n)),
            FAp=blk(iA, ip, (n, n, n)),
            FAu=hess[..., iA, iu].reshape(batch + (n, n)),
            FAx=blk(iA, ix, (n, n, n)),
            Fpp=blk(ip, ip, (n, n)),
            Fpu=hess[..., ip, iu],
            Fpx=blk(ip, ix, (n, n)),
            Fuu=hess[..., iu, iu],
            Fux=hess[..., iu, ix],
            Fxx=blk(ix, ix, (n, n)),
        )

    def self_test(self, n_samples: int = 100, seed: int = 0, rtol: float = 1e-5) -> float:
        """Largest relative gap between closed-form and finite-difference slots.

        States are drawn with ``A = B B^T + 0.5 I`` so that matrix functions
        stay well conditioned.  Returns the worst relative discrepancy; raises
        ``AssertionError`` if it exceeds ``rtol``.
        """
        if self.slot_func is None:
            return 0.0
        rng = np.random.default_rng(seed)
        n = self.dim
        B = rng.normal(size=(n_samples, n, n)) / np.sqrt(n)
        A = B @ np.swapaxes(B, -1, -2) + 0.5 * np.eye(n)
        p = rng.normal(size=(n_samples, n))
        u = rng.normal(size=n_samples)
        x = rng.uniform(-0.5, 0.5, size=(n_samples, n))
        exact = self.slots(A, p, u, x)
        approx = self.fd_slots(A, p, u, x)
        worst = 0.0
        for f in fields(Slots):
            e = np.asarray(getattr(exact, f.name))
            a = np.asarray(getattr(approx, f.name))
            scale = max(1.0, float(np.abs(e).max()))
            worst = max(worst, float(np.abs(e - a).max()) / scale)
        if worst > rtol:
            raise AssertionError(f"{self.name}: closed-form slots differ from finite differences by {worst:.2e}")
        return worst


# ---------------------------------------------------------------------------
# built-in operators


@dataclass(frozen=True)
class RHS:
    """A right-hand side ``f(x)`` with its gradient and Hessian, all vectorized."""

    name: str
    f: Callable
    grad: Callable
    hess: Callable


def _sq(x):
    return (x**2).sum(axis=-1)


def _eye_like(x):
    n = x.shape[-1]
    return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))


def _rank_control_grad(x):
    g = np.zeros_like(x)
    g[..., 0] = 2 * x[..., 0]
    return g


def _rank_control_hess(x):
    h = np.zeros(x.shape + (x.shape[-1],))
    h[..., 0, 0] = 2.0
    return h


RHS_REGISTRY = {
    # concave and positive on the unit ball: values in [2.5, 3]
    "concave": RHS("concave", lambda x: 3.0 - 0.5 * _sq(x), lambda x: -x, lambda x: -_eye_like(x)),
    "sqnorm": RHS("sqnorm", _sq, lambda x: 2 * x, lambda x: 2 * _eye_like(x)),
    "rank_control": RHS("rank_control", lambda x: 1.0 + x[..., 0] ** 2, _rank_control_grad, _rank_control_hess),
    "zero": RHS("zero", lambda x: 0.0 * x[..., 0], np.zeros_like, lambda x: 0.0 * _eye_like(x)),
}


def poisson(dim: int, c: float = 0.0) -> OperatorF:
    """``F = tr(A) - c``."""

    def func(A, p, u, x):
        return np.trace(A, axis1=-2, axis2=-1) - c

    def slot_func(A, p, u, x):
        s = Slots.zeros(A.shape[:-2], dim)
        s.value = func(A, p, u, x)
        s.FA[...] = np.eye(dim)
        return s

    return OperatorF(f"poisson({c:g})", dim, func, slot_func)


def poisson_rhs(dim: int, rhs: str | RHS) -> OperatorF:
    """``F = tr(A) - f(x)`` for a registered right-hand side."""
    if isinstance(rhs, str):
        try:
            rhs = RHS_REGISTRY[rhs]
        except KeyError:
            raise ConfigurationError(f"unknown right-hand side {rhs!r}") from None

    def func(A, p, u, x):
        return np.trace(A, axis1=-2, axis2=-1) - rhs.f(x)

    def slot_func(A, p, u, x):
        s = Slots.zeros(A.shape[:-2], dim)
        s.value = func(A, p, u, x)
        s.FA[...] = np.eye(dim)
        s.Fx = -rhs.grad(x)
        s.Fxx = -np.asarray(rhs.hess(x), dtype=float)
        return s

    return OperatorF(f"poisson_rhs({rhs.name})", dim, func, slot_func)


def logdet(dim: int, c: float = 0.0) -> OperatorF:
    """``F = log det A - c`` (NaN off the positive definite cone)."""

    def func(A, p, u, x):
        sign, val = np.linalg.slogdet(A)
        return np.where(sign > 0, val, np.nan) - c

    def slot_func(A, p, u, x):
        s = Slots.zeros(A.shape[:-2], dim)
        s.value = func(A, p, u, x)
        inv = np.linalg.inv(A)
        s.FA = inv
        s.FAA = -0.5 * (
            np.einsum("...ar,...sb->...abrs", inv, inv) + np.einsum("...as,...rb->...abrs", inv, inv)
        )
        return s

    return OperatorF(f"logdet({c:g})", dim, func, slot_func)


_SPEC_RE = re.compile(r"^\s*(\w+)\s*\(\s*([^()]*?)\s*\)\s*$")


def make_operator(spec: str, dim: int) -> OperatorF:
    """Build a registered operator from ``"poisson(c)"``, ``"poisson_rhs(id)"`` or ``"logdet(c)"``."""
    m = _SPEC_RE.match(spec)
    if not m:
        raise ConfigurationError(f"cannot parse operator spec {spec!r}")
    kind, arg = m.groups()
    try:
        if kind == "poisson":
            return poisson(dim, float(arg or 0.0))
        if kind == "logdet":
            return logdet(dim, float(arg or 0.0))
    except ValueError:
        raise ConfigurationError(f"bad numeric argument in {spec!r}") from None
    if kind == "poisson_rhs":
        return poisson_rhs(dim, arg)
    raise ConfigurationError(f"unknown operator {kind!r}")


# ---------------------------------------------------------------------------
# structure condition


@dataclass(frozen=True)
class ConvexityProbe:
    X: np.ndarray
    Y: float
    Z: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != X.shape[1] or not np.allclose(X, X.T, rtol=0, atol=1e-12):
            raise ConfigurationError("probe X must be a symmetric matrix")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=float))
        if not (np.all(np.isfinite(X)) and np.isfinite(self.Y) and np.all(np.isfinite(self.Z))):
            raise ConfigurationError("probe entries must be finite")

    def norm2(self) -> float:
        return float((self.X**2).sum() + self.Y**2 + (self.Z**2).sum())


def gap_from_slots(s: Slots, Ainv, X, Y, Z) -> np.ndarray:
    """The structure-condition quadratic form, batched over leading axes."""
    Y = np.asarray(Y, dtype=float)
    g = np.einsum("...ab,...abrs,...rs->...", X, s.FAA, X)
    g = g + 2 * np.einsum("...ar,...bs,...ab,...rs->...", s.FA, Ainv, X, X)
    g = g + np.einsum("...a,...ab,...b->...", Z, s.Fxx, Z)
    g = g - 2 * np.einsum("...ab,...ab->...", s.FAu, X) * Y
    g = g - 2 * np.einsum("...abr,...ab,...r->...", s.FAx, X, Z)
    g = g + 2 * np.einsum("...a,...a->...", s.Fux, Z) * Y
    g = g + s.Fuu * Y**2
    return g


def convexity_gap(F: OperatorF, A, p, u, x, probe: ConvexityProbe, use_fd: bool = False) -> float:
    A = np.asarray(A, dtype=float)
    lam = np.linalg.eigvalsh(0.5 * (A + A.T))
    if lam[0] <= 1e-10:
        raise DefinitenessError(f"A is not positive definite (min eigenvalue {lam[0]:.3e})")
    s = F.fd_slots(A, p, u, x) if use_fd else F.slots(A, p, u, x)
    return float(gap_from_slots(s, np.linalg.inv(A), probe.X, probe.Y, probe.Z))


@dataclass(frozen=True)
class StructureSample:
    """Sampling box for the structure check.

    ``A = a_scale^2 B B^T + delta I`` with Gaussian ``B``; ``p`` and ``u``
    uniform in their boxes; ``x`` uniform in the ball of radius ``x_radius``.
    """

    n_samples: int = 10_000
    seed: int = 0
    a_scale: float = 1.0
    delta: float = 1e-2
    p_range: tuple = (-1.0, 1.0)
    u_range: tuple = (-1.0, 1.0)
    x_radius: float = 1.0
    chunk: int = 2_000


@dataclass
class StructureReport:
    operator: str
    verdict: str
    min_gap: float
    n_samples: int
    seed: int
    retries: int
    witness_index: int | None = None
    witness: dict | None = None

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "verdict": self.verdict,
            "min_gap": self.min_gap,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "retries": self.retries,
            "witness_index": self.witness_index,
            "witness": self.witness,
        }


def _draw_states(rng, n, size, spec: StructureSample):
    B = rng.normal(size=(size, n, n)) * spec.a_scale
    A = B @ np.swapaxes(B, -1, -2) + spec.delta * np.eye(n)
    p = rng.uniform(*spec.p_range, size=(size, n))
    u = rng.uniform(*spec.u_range, size=size)
    d = rng.normal(size=(size, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d * (spec.x_radius * rng.uniform(size=(size, 1)) ** (1.0 / n))
    G = rng.normal(size=(size, n, n))
    X = (G + np.swapaxes(G, -1, -2)) / np.sqrt(2)
    Y = rng.normal(size=size)
    Z = rng.normal(size=(size, n))
    return A, p, u, x, X, Y, Z


def check_structure(F: OperatorF, spec: StructureSample | None = None) -> StructureReport:
    """Sample (state, probe) pairs and look for a negative structure gap.

    The verdict is PASS when every gap is ``>= -1e-8 * scale`` with
    ``scale = 1 + |probe|^2 * |second derivatives of F|``.  The first failing
    sample becomes the witness and is re-evaluated through both the
    single-state path and finite-difference slots before being reported.
    """
    spec = spec or StructureSample()
    n = F.dim
    rng = np.random.default_rng(spec.seed)
    min_gap = np.inf
    retries = 0
    done = 0
    while done < spec.n_samples:
        size = min(spec.chunk, spec.n_samples - done)
        A, p, u, x, X, Y, Z = _draw_states(rng, n, size, spec)
        for _ in range(100):
            with np.errstate(all="ignore"):
                s = F.slots(A, p, u, x)
                lam_min = np.linalg.eigvalsh(A)[:, 0]
                bad = (lam_min <= 1e-10) | ~np.isfinite(s.value) | ~np.isfinite(s.second_norm())
            if not bad.any():
                break
            k = int(bad.sum())
            retries += k
            redo = _draw_states(rng, n, k, spec)
            for arr, new in zip((A, p, u, x, X, Y, Z), redo):
                arr[bad] = new
        Ainv = np.linalg.inv(A)
        gaps = gap_from_slots(s, Ainv, X, Y, Z)
        probe2 = (X**2).sum(axis=(1, 2)) + Y**2 + (Z**2).sum(axis=1)
        fnorm = s.second_norm() + 2 * np.linalg.norm(s.FA, axis=(1, 2)) * np.linalg.norm(Ainv, axis=(1, 2))
        scale = 1.0 + probe2 * fnorm
        min_gap = min(min_gap, float(gaps.min()))
        failing = np.flatnonzero(gaps < -1e-8 * scale)
        if failing.size:
            i = int(failing[0])
            probe = ConvexityProbe(X[i], float(Y[i]), Z[i])
            direct = convexity_gap(F, A[i], p[i], u[i], x[i], probe)
            via_fd = convexity_gap(F, A[i], p[i], u[i], x[i], probe, use_fd=True)
            threshold = -1e-8 * scale[i]
            if direct < threshold and via_fd < threshold:
                witness = {
                    "A": A[i].tolist(), "p": p[i].tolist(), "u": float(u[i]), "x": x[i].tolist(),
                    "X": X[i].tolist(), "Y": float(Y[i]), "Z": Z[i].tolist(),
                    "gap": direct, "gap_fd": via_fd,
                }  # fmt: skip
                return StructureReport(F.name, "FAIL", min_gap, done + i + 1, spec.seed, retries, done + i, witness)
        done += size
    return StructureReport(F.name, "PASS", float(min_gap), done, spec.seed, retries)


# ---------------------------------------------------------------------------
# evaluation along a solution


@dataclass(frozen=True)
class EllipticityReport:
    Lambda: float
    min_eig: float
    max_eig: float
    worst_point: tuple


def solution_state(u: ScalarField, grid=None):
    """``(D^2u, Du, u, x)`` by finite differences at the points of ``grid``."""
    grid = grid or hessian_grid(u)
    A = derivative_tensor(u, 2, grid)
    p = derivative_tensor(u, 1, grid)
    vals = u.values[grid.rows_in(u.grid)]
    return A, p, vals, np.array(grid.points), grid


def ellipticity_bounds(F: OperatorF, u: ScalarField) -> EllipticityReport:
    A, p, vals, x, grid = solution_state(u)
    with np.errstate(all="ignore"):
        FA = F.slots(A, p, vals, x).FA
    FA = 0.5 * (FA + np.swapaxes(FA, -1, -2))
    if not np.all(np.isfinite(FA)):
        row = int(np.argmax(~np.isfinite(FA).all(axis=(1, 2))))
        raise EllipticityError(f"F^ij is not finite at {tuple(x[row])}", tuple(x[row]))
    eig = np.linalg.eigvalsh(FA)
    lo, hi = eig[:, 0], eig[:, -1]
    if np.any(lo <= 0):
        row = int(np.argmin(lo))
        raise EllipticityError(f"F^ij has eigenvalue {lo[row]:.3e} <= 0 at {tuple(x[row])}", tuple(x[row]))
    per_point = np.maximum(hi, 1.0 / lo)
    worst = int(np.argmax(per_point))
    return EllipticityReport(
        Lambda=float(per_point[worst]), min_eig=float(lo.min()), max_eig=float(hi.max()), worst_point=tuple(x[worst])
    )


def pde_residual(F: OperatorF, u: ScalarField) -> float:
    A, p, vals, x, _ = solution_state(u)
    with np.errstate(all="ignore"):
        res = np.abs(F(A, p, vals, x))
    return float(np.max(res))


def twice_differentiated_identity_defect(F: OperatorF, u: ScalarField, alpha: int, point) -> float:
    """Absolute value of the equation differentiated twice along axis ``alpha``.

    Every derivative of ``u`` (up to fourth order) is a centred finite
    difference at ``point``; the slots of ``F`` are evaluated at
    ``(D^2u, Du, u, x)`` there.
    """
    grid = u.grid
    base = grid.lattice_index(point)
    x = np.asarray(base, dtype=float) * grid.spacing
    u1 = derivative_tensor_at(u, base, 1)
    u2 = derivative_tensor_at(u, base, 2)
    u3 = derivative_tensor_at(u, base, 3)
    u4 = derivative_tensor_at(u, base, 4)
    s = F.slots(u2, u1, u.at(x), x)
    a = alpha
    ua, uaa = u1[a], u2[a, a]
    t3 = u3[:, :, a]  # u_{ab alpha}
    t2 = u2[:, a]  # u_{a alpha}
    total = (
        np.einsum("ab,ab", s.FA, u4[:, :, a, a])
        + s.Fp @ u3[:, a, a]
        + s.Fu * uaa
        + np.einsum("ab,abrs,rs", t3, s.FAA, t3)
        + t2 @ s.Fpp @ t2
        + s.Fuu * ua**2
        + s.Fxx[a, a]
        + 2 * np.einsum("abr,ab,r", s.FAp, t3, t2)
        + 2 * np.einsum("ab,ab", s.FAu, t3) * ua
        + 2 * np.einsum("ab,ab", s.FAx[:, :, a], t3)
        + 2 * (s.Fpu @ t2) * ua
        + 2 * s.Fpx[:, a] @ t2
        + 2 * s.Fux[a] * ua
    )
    return float(abs(total))
