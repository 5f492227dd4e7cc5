"""Numerical verification toolkit for constant-rank and Harnack-type
statements about Hessian eigenvalues of convex solutions of fully nonlinear
elliptic equations."""

from .field import Grid, Region, ScalarField, build_grid, sample
from .spectra import EigenField, eigen_field
from .operators import OperatorF, make_operator
from .bench import TestProblem, catalog, make_problem, solve_elliptic, validate

__all__ = [
    "EigenField",
    "Grid",
    "OperatorF",
    "Region",
    "ScalarField",
    "TestProblem",
    "build_grid",
    "catalog",
    "eigen_field",
    "make_operator",
    "make_problem",
    "sample",
    "solve_elliptic",
    "validate",
]
