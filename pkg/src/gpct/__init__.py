"""Continuous-time Gaussian-process trajectory estimation on factor graphs."""

from .chain import ChainSolution, FactorGraph, Knot, MeasurementFactor, build_chain, rts_smooth, solve_chain, solve_dense
from .gaussian import (
    BayesNet,
    ConditionalGaussian,
    GaussianDensity,
    LinearFactor,
    QuadraticFactor,
    SingularInformationError,
    eliminate,
    fuse,
    marginal,
)
from .interp import interpolate_factor_graph, update_interp_values
from .lie import Group, InjectivityError, LieElement, LieGaussian
from .lie_ct import LieKnot, NonlinearGraph, SolverConfig, gauss_newton, interpolate_lie, query_lie
from .lti import LtiModel, discretize, transition, wnoa_model
from .query import dense_gp_oracle, interp_coeffs, query_solution

__all__ = [
    "BayesNet", "ChainSolution", "ConditionalGaussian", "FactorGraph", "GaussianDensity", "Group",
    "InjectivityError", "Knot", "LieElement", "LieGaussian", "LieKnot", "LinearFactor", "LtiModel",
    "MeasurementFactor", "NonlinearGraph", "QuadraticFactor", "SingularInformationError", "SolverConfig",
    "build_chain", "dense_gp_oracle", "discretize", "eliminate", "fuse", "gauss_newton", "interp_coeffs",
    "interpolate_factor_graph", "interpolate_lie", "marginal", "query_lie", "query_solution", "rts_smooth",
    "solve_chain", "solve_dense", "transition", "update_interp_values", "wnoa_model",
]
