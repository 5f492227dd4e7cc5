import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harnacklab.errors import (
    CapacityError,
    ConfigurationError,
    DomainError,
    InteriorMarginError,
    KernelResolutionError,
    RegionError,
    SamplingError,
    UnsupportedOrderError,
)
from harnacklab.field import (
    Grid,
    Region,
    ScalarField,
    build_grid,
    derivative_tensor,
    derivative_values,
    differentiate,
    dump_csv,
    integrate_lq,
    margin_for_order,
    mollify,
    sample,
)


def brute_force_points(dim, h, r):
    n = int(round(r / h))
    pts = [p for p in itertools.product(range(-n, n + 1), repeat=dim) if sum(i * i for i in p) <= n * n]
    return sorted(pts)


# ---------------------------------------------------------------------------
# grid


def test_grid_13_points():
    g = build_grid(2, 0.5, 1.0)
    assert len(g) == 13


def test_grid_1d_three_points():
    g = build_grid(1, 1.0, 1.0)
    np.testing.assert_array_equal(g.points[:, 0], [-1.0, 0.0, 1.0])


def test_grid_non_integral_ratio():
    with pytest.raises(ConfigurationError):
        build_grid(2, 0.3, 1.0)


@pytest.mark.parametrize("args", [(0, 0.5, 1.0), (2, 0.0, 1.0), (2, 0.5, 1.5), (2, 0.6, 0.5)])
def test_grid_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        Grid(*args)


def test_grid_capacity():
    with pytest.raises(CapacityError):
        Grid(4, 1 / 128)


@settings(max_examples=25, deadline=None)
@given(dim=st.integers(1, 3), steps=st.integers(1, 6), rsteps=st.integers(1, 3))
def test_grid_matches_enumeration(dim, steps, rsteps):
    h = 1.0 / steps
    r = min(1.0, rsteps * h)
    g = Grid(dim, h, r)
    expected = brute_force_points(dim, h, r)
    assert [tuple(i) for i in g.index.tolist()] == expected
    assert np.all(np.linalg.norm(g.points, axis=1) <= r + 1e-12)
    assert tuple([0] * dim) in g._rows


def test_locate_and_shrink():
    g = Grid(2, 0.25)
    assert np.allclose(g.points[g.locate((0.5, -0.25))], (0.5, -0.25))
    s = g.shrink(2)
    assert s.radius == pytest.approx(0.5)
    rows = s.rows_in(g)
    np.testing.assert_allclose(g.points[rows], s.points)
    with pytest.raises(InteriorMarginError):
        g.shrink(4)


# ---------------------------------------------------------------------------
# sampling


def test_sample_zero():
    g = Grid(2, 0.5)
    assert np.all(sample(g, lambda x: 0.0).values == 0)


def test_sample_quarter():
    g = Grid(2, 0.5)
    u = sample(g, lambda x: 0.5 * float(x @ x))
    assert u.at((0.5, 0.0)) == 0.125
    assert u.at((-0.5, 0.0)) == 0.125
    assert u.at((0.5, -0.5)) == 0.25


def test_sample_nonfinite_names_point():
    g = Grid(2, 0.5)
    with pytest.raises(SamplingError, match=r"\("):
        sample(g, lambda x: 1.0 / (1.0 - np.linalg.norm(x)))


def test_field_length_mismatch():
    g = Grid(2, 0.5)
    with pytest.raises(ConfigurationError):
        ScalarField(g, np.zeros(5))


# ---------------------------------------------------------------------------
# derivatives


def test_linear_first_derivative_exact():
    g = Grid(2, 0.25)
    u = sample(g, lambda x: x[:, 0], vectorized=True)
    assert differentiate(u, (0.25, 0.25), (1, 0)) == 1.0


def test_quadratic_second_derivative_exact():
    g = Grid(3, 0.25)
    u = sample(g, lambda x: 0.5 * (x**2).sum(1), vectorized=True)
    for i in range(3):
        mi = [0, 0, 0]
        mi[i] = 2
        assert differentiate(u, (0.0, 0.25, 0.0), mi) == pytest.approx(1.0, abs=1e-13)


def test_sin_first_derivative_rate():
    errs = []
    for h in (1 / 8, 1 / 16):
        g = Grid(1, h)
        u = sample(g, lambda x: np.sin(x[:, 0]), vectorized=True)
        errs.append(abs(differentiate(u, (0.0,), (1,)) - 1.0))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.01)


def test_order_limits():
    g = Grid(2, 0.25)
    u = sample(g, lambda x: x[:, 0], vectorized=True)
    with pytest.raises(UnsupportedOrderError):
        differentiate(u, (0.0, 0.0), (5, 0))
    with pytest.raises(InteriorMarginError):
        differentiate(u, (1.0, 0.0), (1, 0))
    with pytest.raises(InteriorMarginError):
        differentiate(u, (0.75, 0.0), (4, 0))


def test_margins_cover_all_mixed_stencils():
    # every admissible point of the shrunk grid must have a full stencil
    for dim in (2, 3):
        g = Grid(dim, 1 / 8)
        u = sample(g, lambda x: (x**2).sum(1), vectorized=True)
        for order in (1, 2, 3, 4):
            target = g.shrink(margin_for_order(order, dim))
            vals = derivative_tensor(u, order, target)
            assert np.all(np.isfinite(vals))


def _poly_derivative(coeffs, exps, orders, x):
    """Exact derivative of sum_c c * prod x_i^e_i."""
    total = np.zeros(len(x))
    for c, e in zip(coeffs, exps):
        term = np.full(len(x), c)
        for i, (ei, oi) in enumerate(zip(e, orders)):
            if oi > ei:
                term = term * 0
                break
            fac = np.prod(np.arange(ei - oi + 1, ei + 1)) if oi else 1.0
            term = term * fac * x[:, i] ** (ei - oi)
        total += term
    return total


@settings(max_examples=40, deadline=None)
@given(
    data=st.data(),
    dim=st.integers(1, 3),
    order=st.integers(1, 4),
)
def test_exact_on_low_degree_polynomials(data, dim, order):
    degree = order + 1
    monomials = [e for e in itertools.product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    coeffs = data.draw(st.lists(st.floats(-2, 2), min_size=len(monomials), max_size=len(monomials)))
    axes = data.draw(st.lists(st.integers(0, dim - 1), min_size=order, max_size=order))
    orders = tuple(axes.count(i) for i in range(dim))
    g = Grid(dim, 1 / 4)

    def poly(x):
        return sum(c * np.prod(x**np.array(e), axis=1) for c, e in zip(coeffs, monomials))

    u = sample(g, poly, vectorized=True)
    target = g.shrink(margin_for_order(order, dim))
    got = derivative_values(u, orders, target)
    exact = _poly_derivative(coeffs, monomials, orders, np.asarray(target.points))
    np.testing.assert_allclose(got, exact, atol=1e-9 * max(1.0, np.abs(coeffs).max()) * 4**order)


# ---------------------------------------------------------------------------
# quadrature


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.0, 10.0), q=st.floats(0.05, 5.0))
def test_lq_of_constant(c, q):
    g = Grid(2, 1 / 8)
    u = ScalarField(g, np.full(len(g), c))
    assert integrate_lq(u, Region.ball(2), q) == pytest.approx(c, rel=1e-12, abs=1e-300)


def test_lq_x1_squared_disk():
    # mean of x_1^2 over the disk of radius 1/2 is 1/16
    errs = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        u = sample(Grid(2, h), lambda x: x[:, 0] ** 2, vectorized=True)
        errs.append(abs(integrate_lq(u, Region.ball(2, 0.5), 1.0) - 1 / 16))
    assert errs[-1] < 2e-4
    assert errs[2] < errs[0]


def test_lq_errors():
    g = Grid(2, 1 / 4)
    vals = np.ones(len(g))
    vals[g.locate((0, 0))] = -1.0
    with pytest.raises(DomainError):
        integrate_lq(ScalarField(g, vals), Region.ball(2), 1.0)
    with pytest.raises(DomainError):
        integrate_lq(ScalarField(g, np.ones(len(g))), Region.ball(2), 0.0)
    with pytest.raises(RegionError):
        integrate_lq(ScalarField(g, np.ones(len(g))), Region((0.6, 0.6), 0.05), 1.0)
    with pytest.raises(RegionError):
        integrate_lq(ScalarField(g, np.ones(len(g))), Region((0.8, 0.0), 0.5), 1.0)


# ---------------------------------------------------------------------------
# mollification


def test_mollify_constant():
    g = Grid(2, 1 / 16)
    u = ScalarField(g, np.full(len(g), 3.5))
    m = mollify(u, 3 / 16)
    assert m.grid == g.shrink(3)
    np.testing.assert_allclose(m.values, 3.5, rtol=1e-14)


def test_mollify_linear_unchanged():
    g = Grid(2, 1 / 16)
    u = sample(g, lambda x: x[:, 0], vectorized=True)
    m = mollify(u, 2 / 16)
    np.testing.assert_allclose(m.values, m.grid.points[:, 0], atol=1e-14)


def test_mollify_abs_is_convex_at_zero():
    g = Grid(1, 1 / 16)
    u = sample(g, lambda x: np.abs(x[:, 0]), vectorized=True)
    m = mollify(u, 4 / 16)
    assert differentiate(m, (0.0,), (2,)) >= 0.0


def test_mollify_resolution_error():
    g = Grid(2, 1 / 8)
    with pytest.raises(KernelResolutionError):
        mollify(ScalarField(g, np.ones(len(g))), 1 / 16)


def test_mollify_wide_kernel_beyond_pad():
    g = Grid(1, 1 / 16)
    u = ScalarField(g, np.ones(len(g)))
    m = mollify(u, 5 / 16)
    np.testing.assert_allclose(m.values, 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(-5, 5))
def test_mollify_monotone_and_shift(seed, c):
    rng = np.random.default_rng(seed)
    g = Grid(2, 1 / 8)
    a = rng.normal(size=len(g))
    b = a + rng.uniform(0, 1, size=len(g))
    ma, mb = mollify(ScalarField(g, a), 2 / 8), mollify(ScalarField(g, b), 2 / 8)
    assert np.all(mb.values >= ma.values - 1e-14)
    shifted = mollify(ScalarField(g, a + c), 2 / 8)
    np.testing.assert_allclose(shifted.values, ma.values + c, atol=1e-12)


# ---------------------------------------------------------------------------
# dumps


def test_dump_csv_round_trip(tmp_path):
    g = Grid(2, 0.5)
    u = sample(g, lambda x: np.exp(x[:, 0]) / 3, vectorized=True)
    path = tmp_path / "u.csv"
    dump_csv(u, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x_1,x_2,value"
    assert len(lines) == 14
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(table[:, 2], u.values)
