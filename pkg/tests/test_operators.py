import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harnacklab.errors import ConfigurationError, DefinitenessError, EllipticityError
from harnacklab.field import Grid, sample
from harnacklab.operators import (
    RHS,
    ConvexityProbe,
    OperatorF,
    StructureSample,
    check_structure,
    convexity_gap,
    ellipticity_bounds,
    logdet,
    make_operator,
    pde_residual,
    poisson_rhs,
    twice_differentiated_identity_defect,
)

SPECS = ["poisson(0)", "poisson(2.5)", "poisson_rhs(concave)", "poisson_rhs(sqnorm)",
         "poisson_rhs(rank_control)", "poisson_rhs(zero)", "logdet(0)", "logdet(1)"]  # fmt: skip


def spd(rng, n):
    B = rng.normal(size=(n, n))
    return B @ B.T + 0.5 * np.eye(n)


def sym(rng, n):
    G = rng.normal(size=(n, n))
    return (G + G.T) / 2


@pytest.mark.parametrize("spec", SPECS)
@pytest.mark.parametrize("n", [2, 3])
def test_self_test(spec, n):
    assert make_operator(spec, n).self_test(n_samples=100) <= 1e-5


@pytest.mark.parametrize("spec", SPECS)
def test_slot_symmetries(spec):
    rng = np.random.default_rng(0)
    F = make_operator(spec, 3)
    A = spd(rng, 3)
    s = F.slots(A, rng.normal(size=3), 0.3, rng.uniform(-0.5, 0.5, 3))
    np.testing.assert_allclose(s.FA, s.FA.T, atol=1e-14)
    np.testing.assert_allclose(s.FAA, np.transpose(s.FAA, (2, 3, 0, 1)), atol=1e-14)
    np.testing.assert_allclose(s.FAA, np.transpose(s.FAA, (1, 0, 2, 3)), atol=1e-14)


def test_logdet_slots_closed_form():
    F = logdet(2)
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    s = F.slots(A, 0, 0, 0)
    np.testing.assert_allclose(s.FA, np.linalg.inv(A))
    assert s.value == pytest.approx(np.log(np.linalg.det(A)))


def test_make_operator_errors():
    for bad in ["poisson", "poisson(x)", "cubic(1)", "poisson_rhs(nope)"]:
        with pytest.raises(ConfigurationError):
            make_operator(bad, 2)


# ---------------------------------------------------------------------------
# structure condition


def test_gap_poisson_formula():
    rng = np.random.default_rng(2)
    F = make_operator("poisson(1)", 3)
    for _ in range(20):
        A, X = spd(rng, 3), sym(rng, 3)
        gap = convexity_gap(F, A, np.zeros(3), 0.0, np.zeros(3), ConvexityProbe(X, 0.0, np.zeros(3)))
        assert gap == pytest.approx(2 * np.trace(X @ np.linalg.inv(A) @ X), rel=1e-12)
        assert gap > 0


def test_gap_logdet_identity():
    rng = np.random.default_rng(3)
    F = make_operator("logdet(0)", 3)
    X = sym(rng, 3)
    gap = convexity_gap(F, np.eye(3), np.zeros(3), 0.0, np.zeros(3), ConvexityProbe(X, 0.0, np.zeros(3)))
    assert gap == pytest.approx(np.sum(X**2), rel=1e-12)


def test_gap_convex_rhs_negative():
    F = make_operator("poisson_rhs(sqnorm)", 3)
    probe = ConvexityProbe(np.zeros((3, 3)), 0.0, np.array([1.0, 0, 0]))
    assert convexity_gap(F, np.eye(3), np.zeros(3), 0.0, np.zeros(3), probe) == pytest.approx(-2.0)


def test_gap_requires_spd():
    F = make_operator("poisson(1)", 2)
    probe = ConvexityProbe(np.eye(2), 0.0, np.zeros(2))
    with pytest.raises(DefinitenessError):
        convexity_gap(F, np.diag([1.0, 0.0]), np.zeros(2), 0.0, np.zeros(2), probe)


def test_probe_validation():
    with pytest.raises(ConfigurationError):
        ConvexityProbe(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.0, np.zeros(2))
    with pytest.raises(ConfigurationError):
        ConvexityProbe(np.eye(2), np.nan, np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.floats(-10, 10), spec=st.sampled_from(SPECS))
def test_gap_is_quadratic(seed, t, spec):
    rng = np.random.default_rng(seed)
    F = make_operator(spec, 3)
    A, X, Y, Z = spd(rng, 3), sym(rng, 3), rng.normal(), rng.normal(size=3)
    state = (A, rng.normal(size=3), rng.normal(), rng.uniform(-0.5, 0.5, 3))
    g1 = convexity_gap(F, *state, ConvexityProbe(X, Y, Z))
    gt = convexity_gap(F, *state, ConvexityProbe(t * X, t * Y, t * Z))
    assert gt == pytest.approx(t * t * g1, rel=1e-9, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gap_trace_operators_split(seed):
    # for F = tr A - f(x) the gap is 2 tr(X A^-1 X) - f_xx Z Z
    rng = np.random.default_rng(seed)
    F = make_operator("poisson_rhs(concave)", 3)
    A, X, Z = spd(rng, 3), sym(rng, 3), rng.normal(size=3)
    gap = convexity_gap(F, A, np.zeros(3), 0.0, np.zeros(3), ConvexityProbe(X, rng.normal(), Z))
    assert gap == pytest.approx(2 * np.trace(X @ np.linalg.inv(A) @ X) + Z @ Z, rel=1e-12)


def test_gap_fd_slots_agree():
    rng = np.random.default_rng(5)
    F = make_operator("logdet(0)", 3)
    A, X = spd(rng, 3), sym(rng, 3)
    probe = ConvexityProbe(X, 0.4, rng.normal(size=3))
    exact = convexity_gap(F, A, np.zeros(3), 0.0, np.zeros(3), probe)
    fd = convexity_gap(F, A, np.zeros(3), 0.0, np.zeros(3), probe, use_fd=True)
    assert fd == pytest.approx(exact, rel=1e-5)


@pytest.mark.parametrize("spec", ["poisson(1)", "logdet(1)"])
def test_structure_pass(spec):
    rep = check_structure(make_operator(spec, 3), StructureSample(n_samples=10_000, seed=4))
    assert rep.verdict == "PASS"
    assert rep.n_samples == 10_000 and rep.witness is None


def test_structure_fail_with_witness():
    F = make_operator("poisson_rhs(sqnorm)", 3)
    rep = check_structure(F, StructureSample(n_samples=1000, seed=0))
    assert rep.verdict == "FAIL"
    assert rep.n_samples <= 1000
    w = rep.witness
    probe = ConvexityProbe(np.array(w["X"]), w["Y"], np.array(w["Z"]))
    again = convexity_gap(F, np.array(w["A"]), np.array(w["p"]), w["u"], np.array(w["x"]), probe)
    assert again == pytest.approx(w["gap"]) and again < 0


def test_structure_deterministic():
    F = make_operator("logdet(0)", 2)
    a = check_structure(F, StructureSample(n_samples=3000, seed=9))
    b = check_structure(F, StructureSample(n_samples=3000, seed=9))
    assert a.to_dict() == b.to_dict()


# ---------------------------------------------------------------------------
# evaluation along solutions


def test_ellipticity_trace():
    u = sample(Grid(2, 1 / 8), lambda x: np.sin(x[:, 0]) + x[:, 1] ** 4, vectorized=True)
    rep = ellipticity_bounds(make_operator("poisson(3)", 2), u)
    assert rep.Lambda == 1.0 and rep.min_eig == 1.0 and rep.max_eig == 1.0


def test_ellipticity_logdet():
    g = Grid(2, 1 / 8)
    u = sample(g, lambda x: 0.5 * (x**2).sum(1), vectorized=True)
    assert ellipticity_bounds(make_operator("logdet(0)", 2), u).Lambda == pytest.approx(1.0, abs=1e-12)
    u = sample(g, lambda x: 0.25 * x[:, 0] ** 2 + x[:, 1] ** 2, vectorized=True)
    rep = ellipticity_bounds(make_operator("logdet(0)", 2), u)
    assert rep.Lambda == pytest.approx(2.0, rel=1e-12)
    assert rep.min_eig == pytest.approx(0.5) and rep.max_eig == pytest.approx(2.0)


def test_ellipticity_violation_carries_point():
    u = sample(Grid(2, 1 / 8), lambda x: -0.5 * (x**2).sum(1), vectorized=True)
    with pytest.raises(EllipticityError) as info:
        ellipticity_bounds(make_operator("logdet(0)", 2), u)
    assert len(info.value.point) == 2


def test_pde_residual_exact_cases():
    g = Grid(3, 1 / 8)
    u = sample(g, lambda x: 0.5 * (x**2).sum(1), vectorized=True)
    assert pde_residual(make_operator("poisson(3)", 3), u) < 1e-12
    u = sample(g, lambda x: 0.5 * x[:, 0] ** 2, vectorized=True)
    assert pde_residual(make_operator("poisson(1)", 3), u) < 1e-12


def _exp_problem(dim):
    # u = exp(x_1 + x_2/2) solves tr A = f with f = 1.25 u
    def u_star(x):
        return np.exp(x[..., 0] + 0.5 * x[..., 1])

    def f(x):
        return 1.25 * u_star(x)

    def grad(x):
        g = np.zeros_like(x)
        g[..., 0] = f(x)
        g[..., 1] = 0.5 * f(x)
        return g

    def hess(x):
        w = np.zeros(x.shape[-1])
        w[:2] = (1.0, 0.5)
        return f(x)[..., None, None] * np.einsum("i,j->ij", w, w)

    return u_star, poisson_rhs(dim, RHS("exp", f, grad, hess))


def test_manufactured_residual_order():
    u_star, F = _exp_problem(2)
    res = [pde_residual(F, sample(Grid(2, h), u_star, vectorized=True)) for h in (1 / 8, 1 / 16)]
    # the admissible interior grows with refinement, so allow the usual window
    assert 3.0 <= res[0] / res[1] <= 5.0
    assert res[1] <= 10 * (1 / 16) ** 2


def test_identity_defect_trivial():
    g = Grid(3, 1 / 8)
    u = sample(g, lambda x: 0.5 * (x**2).sum(1), vectorized=True)
    for spec in ("poisson(3)", "logdet(0)"):
        for alpha in range(3):
            assert twice_differentiated_identity_defect(make_operator(spec, 3), u, alpha, (0.25, 0.125, 0.0)) < 1e-9


def test_identity_defect_refinement():
    u_star, F = _exp_problem(2)
    d = []
    for h in (1 / 8, 1 / 16):
        u = sample(Grid(2, h), u_star, vectorized=True)
        d.append(twice_differentiated_identity_defect(F, u, 0, (0.25, 0.25)))
    assert d[1] <= 10 * (1 / 16) ** 2
    assert d[0] / d[1] == pytest.approx(4.0, rel=0.15)


def test_identity_defect_fd_fallback_agrees():
    u_star, F = _exp_problem(2)
    F_fd = OperatorF("exp-fd", 2, F.func)
    u = sample(Grid(2, 1 / 16), u_star, vectorized=True)
    exact = twice_differentiated_identity_defect(F, u, 1, (0.25, 0.25))
    fd = twice_differentiated_identity_defect(F_fd, u, 1, (0.25, 0.25))
    assert fd == pytest.approx(exact, rel=1e-3, abs=1e-6)
