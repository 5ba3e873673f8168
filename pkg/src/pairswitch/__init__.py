"""Optimal pairs-trading switching cutoffs for mean-reverting spreads.

Modules
-------
specfun   fundamental solutions (Kummer/Tricomi functions, OU integrals)
model     parameters, gains, the fundamental pair
solver    case classification and the smooth-fit systems
valuefn   piecewise value functions and their verification
oracle    finite-difference solver of the variational inequalities
sim       Monte-Carlo simulation of the switching strategy
cli       command-line front end
"""
from .model import FundamentalPair, GainFunctions, ModelKind, ModelParams, ParameterError
from .solver import Case, Coefficients, CutoffSet, SolveReport, SolverError, classify_case, solve
from .valuefn import ValueTriple, assemble

__all__ = [
    "ModelKind",
    "ModelParams",
    "ParameterError",
    "GainFunctions",
    "FundamentalPair",
    "Case",
    "CutoffSet",
    "Coefficients",
    "SolveReport",
    "SolverError",
    "classify_case",
    "solve",
    "ValueTriple",
    "assemble",
]

__version__ = "0.1.0"
