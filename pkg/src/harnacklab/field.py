"""Grid-sampled scalar functions on the unit ball.

Points live on the lattice ``h * Z^n`` intersected with the closed ball of
radius ``r``.  Derivatives are centered finite differences built as tensor
products of one-dimensional stencils, quadrature is the midpoint rule with one
cell per lattice point, and mollification is a discrete convolution with the
classical bump kernel.

All heavy lifting happens on a dense "box" array that holds NaN outside the
ball, so a stencil that leaves the grid simply produces NaN.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CapacityError,
    ConfigurationError,
    DomainError,
    InteriorMarginError,
    KernelResolutionError,
    RegionError,
    SamplingError,
    UnsupportedOrderError,
)

MAX_BOX_POINTS = 20_000_000
PAD = 3

# order -> (offsets, weights); all weights are divided by h**order
_STENCIL_1D = {
    0: ((0,), (1.0,)),
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
    4: ((-2, -1, 0, 1, 2), (1.0, -4.0, 6.0, -4.0, 1.0)),
}


class Grid:
    """Lattice points of spacing ``spacing`` inside the ball of radius ``radius``.

    Points are stored as integer multi-indices in lexicographic order; the
    coordinates are ``index * spacing``.
    """

    __slots__ = ("dim", "spacing", "radius", "steps", "index", "__dict__")

    def __init__(self, dim: int, spacing: float, radius: float = 1.0):
        if int(dim) != dim or dim < 1:
            raise ConfigurationError(f"dim must be a positive integer, got {dim!r}")
        if not (0 < spacing <= radius <= 1.0 + 1e-12):
            raise ConfigurationError(
                f"need 0 < spacing <= radius <= 1, got spacing={spacing}, radius={radius}"
            )
        ratio = radius / spacing
        steps = int(round(ratio))
        if abs(ratio - steps) > 1e-9 * max(1.0, ratio):
            raise ConfigurationError(
                f"radius/spacing = {ratio!r} is not an integer"
            )
        width = 2 * steps + 1
        if float(width) ** dim > MAX_BOX_POINTS:
            raise CapacityError(
                f"grid box of {width}^{dim} points exceeds capacity {MAX_BOX_POINTS}"
            )
        self.dim = int(dim)
        self.spacing = float(spacing)
        self.radius = steps * float(spacing)
        self.steps = steps
        axes = np.indices((width,) * self.dim).reshape(self.dim, -1).T - steps
        inside = (axes**2).sum(axis=1) <= steps**2
        self.index = axes[inside]
        self.index.setflags(write=False)

    def __repr__(self):
        return f"Grid(dim={self.dim}, spacing={self.spacing!r}, radius={self.radius!r}, points={len(self)})"

    def __len__(self):
        return self.index.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.dim == other.dim
            and self.steps == other.steps
            and math.isclose(self.spacing, other.spacing, rel_tol=1e-12)
        )

    def __hash__(self):
        return hash((self.dim, self.steps, round(self.spacing, 12)))

    @cached_property
    def points(self) -> np.ndarray:
        pts = self.index * self.spacing
        pts.setflags(write=False)
        return pts

    @cached_property
    def _rows(self) -> dict:
        return {tuple(int(v) for v in idx): row for row, idx in enumerate(self.index)}

    @property
    def box_shape(self) -> tuple:
        return (2 * self.steps + 1,) * self.dim

    def locate(self, point) -> int:
        """Row of the grid point at coordinate ``point`` (must be a lattice point)."""
        idx = self.lattice_index(point)
        try:
            return self._rows[idx]
        except KeyError:
            raise InteriorMarginError(f"point {tuple(point)} is not inside the grid") from None

    def lattice_index(self, point) -> tuple:
        x = np.asarray(point, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise ConfigurationError(f"point has {x.size} coordinates, grid has dim {self.dim}")
        idx = np.rint(x / self.spacing)
        if np.max(np.abs(idx * self.spacing - x)) > 1e-9 * self.spacing:
            raise ConfigurationError(f"point {tuple(x)} is not a lattice point")
        return tuple(int(v) for v in idx)

    def contains_index(self, idx) -> bool:
        return tuple(int(v) for v in idx) in self._rows

    def shrink(self, k: int) -> "Grid":
        """Concentric grid whose radius is ``k`` lattice steps smaller."""
        if self.steps - k < 1:
            raise InteriorMarginError(
                f"cannot shrink a grid of {self.steps} steps by {k}"
            )
        return Grid(self.dim, self.spacing, (self.steps - k) * self.spacing)

    def to_box(self, values: np.ndarray, pad: int = PAD) -> np.ndarray:
        """Scatter per-point values (leading axis) into a NaN-filled padded box."""
        values = np.asarray(values, dtype=float)
        shape = tuple(s + 2 * pad for s in self.box_shape) + values.shape[1:]
        box = np.full(shape, np.nan)
        box[tuple((self.index + self.steps + pad).T)] = values
        return box

    def rows_in(self, outer: "Grid") -> np.ndarray:
        """Row numbers in ``outer`` of every point of this (smaller) grid."""
        if outer.dim != self.dim or not math.isclose(outer.spacing, self.spacing, rel_tol=1e-12):
            raise ConfigurationError("grids are not on the same lattice")
        if self.steps > outer.steps:
            raise InteriorMarginError("grid is not contained in the outer grid")
        lookup = np.full(outer.box_shape, -1, dtype=np.int64)
        lookup[tuple((outer.index + outer.steps).T)] = np.arange(len(outer))
        rows = lookup[tuple((self.index + outer.steps).T)]
        if np.any(rows < 0):
            raise InteriorMarginError("grid is not contained in the outer grid")
        return rows


def build_grid(dim: int, spacing: float, radius: float = 1.0) -> Grid:
    return Grid(dim, spacing, radius)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    name: str = "u"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.shape[0] != len(self.grid):
            raise ConfigurationError(
                f"field {self.name!r} has {vals.shape[0]} values for {len(self.grid)} grid points"
            )
        bad = ~np.isfinite(vals)
        if bad.any():
            row = int(np.argmax(bad))
            raise SamplingError(
                f"field {self.name!r} is not finite at {tuple(self.grid.points[row])}"
            )
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    @cached_property
    def box(self) -> np.ndarray:
        return self.grid.to_box(self.values)

    def at(self, point) -> float:
        return float(self.values[self.grid.locate(point)])

    def restrict(self, grid: Grid) -> "ScalarField":
        return ScalarField(grid, self.values[grid.rows_in(self.grid)], self.name)

    def map(self, fn: Callable[[np.ndarray], np.ndarray], name: str | None = None) -> "ScalarField":
        return ScalarField(self.grid, fn(self.values), name or self.name)

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.values + other.restrict(self.grid).values, self.name)
        return ScalarField(self.grid, self.values + other, self.name)

    def __mul__(self, t):
        return ScalarField(self.grid, self.values * t, self.name)

    __rmul__ = __mul__


@dataclass(frozen=True)
class Region:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise RegionError(f"region radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def ball(cls, dim: int, radius: float = 0.5) -> "Region":
        return cls((0.0,) * dim, radius)

    def mask(self, grid: Grid) -> np.ndarray:
        if len(self.center) != grid.dim:
            raise RegionError("region and grid dimensions differ")
        c = np.asarray(self.center)
        if np.linalg.norm(c) + self.radius > grid.radius + 1e-12:
            raise RegionError(
                f"region (center {self.center}, radius {self.radius}) is not inside the grid ball of radius {grid.radius}"
            )
        d2 = ((grid.points - c) ** 2).sum(axis=1)
        return d2 <= self.radius**2 * (1 + 1e-12)


def sample(grid: Grid, fn: Callable, name: str = "u", vectorized: bool = False) -> ScalarField:
    """Evaluate ``fn`` at every grid point.

    With ``vectorized=True`` the function receives the whole ``(npts, dim)``
    coordinate array at once.
    """
    pts = grid.points
    with np.errstate(all="ignore"):
        if vectorized:
            vals = np.asarray(fn(pts), dtype=float).reshape(-1)
        else:
            vals = np.array([float(fn(p)) for p in pts])
    bad = ~np.isfinite(vals)
    if bad.any():
        row = int(np.argmax(bad))
        raise SamplingError(f"{name!r} is not finite at grid point {tuple(pts[row])}")
    return ScalarField(grid, vals, name)


def _normalize_orders(orders, dim: int) -> tuple:
    orders = tuple(int(o) for o in orders)
    if len(orders) != dim:
        raise ConfigurationError(f"derivative orders {orders} do not match dim {dim}")
    if any(o < 0 for o in orders):
        raise ConfigurationError(f"negative derivative order in {orders}")
    if sum(orders) > 4:
        raise UnsupportedOrderError(f"total derivative order {sum(orders)} > 4")
    if any(o > 4 for o in orders):
        raise UnsupportedOrderError(f"per-axis order above 4 in {orders}")
    return orders


def axes_to_orders(axes: Sequence[int], dim: int) -> tuple:
    """Convert a list of differentiation axes, e.g. ``(0, 0, 1)``, to per-axis counts."""
    counts = [0] * dim
    for a in axes:
        counts[a] += 1
    return tuple(counts)


def stencil(orders) -> list:
    """Tensor-product stencil as ``[(offset, weight), ...]`` with nonzero weights."""
    parts = [_STENCIL_1D[o] for o in orders]
    out = []
    for combo in itertools.product(*(zip(*p) for p in parts)):
        offset = tuple(c[0] for c in combo)
        weight = math.prod(c[1] for c in combo)
        if weight != 0.0:
            out.append((offset, weight))
    return out


def stencil_offsets(order: int, dim: int) -> list:
    """Every lattice offset touched by the derivative stencils of ``order``."""
    offs = set()
    for axes in itertools.combinations_with_replacement(range(dim), order):
        offs.update(off for off, _ in stencil(axes_to_orders(axes, dim)))
    return sorted(offs)


def stencil_margin(orders) -> int:
    """Smallest k such that every stencil point lies within k lattice steps."""
    reach2 = max(sum(o * o for o in off) for off, _ in stencil(orders))
    k = math.isqrt(reach2)
    return k if k * k == reach2 else k + 1


def margin_for_order(order: int, dim: int) -> int:
    """Grid shrink needed so every derivative of total ``order`` is admissible."""
    if order > 4:
        raise UnsupportedOrderError(f"order {order} > 4")
    best = 0
    for axes in itertools.combinations_with_replacement(range(dim), order):
        best = max(best, stencil_margin(axes_to_orders(axes, dim)))
    return best


def _derivative_box(field: ScalarField, orders: tuple) -> np.ndarray:
    """FD derivative on the inner box of ``field.grid`` (NaN where undefined)."""
    grid = field.grid
    box = field.box
    width = 2 * grid.steps + 1
    h = grid.spacing
    out = np.zeros(grid.box_shape)
    for offset, weight in stencil(orders):
        sl = tuple(slice(PAD + o, PAD + o + width) for o in offset)
        out += weight * box[sl]
    return out / h ** sum(orders)


def derivative_values(field: ScalarField, orders, target: Grid | None = None) -> np.ndarray:
    """Finite-difference derivative of ``field`` at every point of ``target``.

    ``orders`` gives the derivative count per axis.  ``target`` defaults to
    the largest concentric grid on which the stencil fits.
    """
    grid = field.grid
    orders = _normalize_orders(orders, grid.dim)
    if target is None:
        target = grid.shrink(stencil_margin(orders)) if sum(orders) else grid
    box = _derivative_box(field, orders)
    if target.steps > grid.steps:
        raise InteriorMarginError("target grid is larger than the field's grid")
    vals = box[tuple((target.index + grid.steps).T)]
    bad = np.isnan(vals)
    if bad.any():
        row = int(np.argmax(bad))
        raise InteriorMarginError(
            f"stencil for orders {orders} leaves the grid at {tuple(target.points[row])}"
        )
    return vals


def differentiate(field: ScalarField, point, multi_index) -> float:
    """Centered finite-difference derivative of ``field`` at a single grid point.

    ``multi_index`` lists the derivative order along each axis, so ``(1, 0)``
    is d/dx_1 and ``(0, 2)`` is d^2/dx_2^2 in two dimensions.
    """
    grid = field.grid
    orders = _normalize_orders(multi_index, grid.dim)
    base = grid.lattice_index(point)
    if not grid.contains_index(base):
        raise InteriorMarginError(f"point {tuple(point)} is not a grid point")
    total = 0.0
    for offset, weight in stencil(orders):
        idx = tuple(b + o for b, o in zip(base, offset))
        if not grid.contains_index(idx):
            raise InteriorMarginError(
                f"stencil for orders {orders} at {tuple(point)} leaves the grid"
            )
        total += weight * field.values[grid._rows[idx]]
    return total / grid.spacing ** sum(orders)


def derivative_tensor(field: ScalarField, order: int, target: Grid) -> np.ndarray:
    """Full symmetric tensor of ``order``-th derivatives, shape ``(npts,) + (dim,)*order``."""
    dim = field.grid.dim
    out = np.empty((len(target),) + (dim,) * order)
    for axes in itertools.combinations_with_replacement(range(dim), order):
        vals = derivative_values(field, axes_to_orders(axes, dim), target)
        for perm in set(itertools.permutations(axes)):
            out[(slice(None),) + perm] = vals
    return out


def derivative_tensor_at(field: ScalarField, index, order: int) -> np.ndarray:
    """Symmetric derivative tensor at one point, given by its lattice multi-index."""
    dim = field.grid.dim
    pt = np.asarray(index, dtype=float) * field.grid.spacing
    out = np.empty((dim,) * order)
    for axes in itertools.combinations_with_replacement(range(dim), order):
        val = differentiate(field, pt, axes_to_orders(axes, dim))
        for perm in set(itertools.permutations(axes)):
            out[perm] = val
    return out


def integrate_lq(field: ScalarField, region: Region, q: float) -> float:
    """Normalized L^q average ``(mean_{region} v^q)^(1/q)`` by the midpoint rule."""
    if not q > 0:
        raise DomainError(f"q must be positive, got {q}")
    mask = region.mask(field.grid)
    if not mask.any():
        raise RegionError("region contains no grid points")
    vals = field.values[mask]
    if np.any(vals < 0):
        row = np.flatnonzero(mask)[int(np.argmin(vals))]
        raise DomainError(
            f"negative value {field.values[row]!r} at {tuple(field.grid.points[row])}"
        )
    top = float(vals.max())
    if top == 0.0:
        return 0.0
    # scale by the maximum so that v^q neither underflows nor overflows
    return top * float(np.mean((vals / top) ** q) ** (1.0 / q))


def bump_weights(spacing: float, eps: float, dim: int) -> list:
    """Normalized discrete weights of the bump ``exp(-1/(1-t^2))``, ``t = |y|/eps``."""
    k = int(math.ceil(eps / spacing - 1e-12))
    weights = []
    for off in itertools.product(range(-k, k + 1), repeat=dim):
        t2 = sum(o * o for o in off) * spacing**2 / eps**2
        if t2 < 1.0:
            weights.append((off, math.exp(-1.0 / (1.0 - t2))))
    total = sum(w for _, w in weights)
    return [(off, w / total) for off, w in weights]


def mollify(field: ScalarField, eps: float) -> ScalarField:
    """Convolve with the normalized bump of radius ``eps``.

    The result lives on the concentric grid shrunk by ``ceil(eps/h)`` steps,
    so every kernel footprint stays inside the original grid.
    """
    grid = field.grid
    h = grid.spacing
    if eps < h * (1 - 1e-12):
        raise KernelResolutionError(f"mollifier radius {eps} is below the grid spacing {h}")
    k = int(math.ceil(eps / h - 1e-12))
    if k > PAD:
        box = grid.to_box(field.values, pad=k)
        pad = k
    else:
        box, pad = field.box, PAD
    width = 2 * grid.steps + 1
    out = np.zeros(grid.box_shape)
    for offset, w in bump_weights(h, eps, grid.dim):
        sl = tuple(slice(pad + o, pad + o + width) for o in offset)
        out += w * box[sl]
    target = grid.shrink(k)
    vals = out[tuple((target.index + grid.steps).T)]
    return ScalarField(target, vals, f"{field.name}_eps")


def dump_csv(field: ScalarField, path) -> None:
    write_columns_csv(field.grid, {"value": field.values}, path)


def write_columns_csv(grid: Grid, columns: dict, path) -> None:
    """CSV with header ``x_1,...,x_n,<columns>``; floats at 17 significant digits."""
    names = [f"x_{i + 1}" for i in range(grid.dim)] + list(columns)
    data = [grid.points] + [np.asarray(c, dtype=float).reshape(len(grid), -1) for c in columns.values()]
    table = np.hstack(data)
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=",".join(names), comments="")
