"""Numerical lab for the stochastic dyadic model on a tree."""

from .dynamics import ModelKind
from .integrate import IntegrationError, NoisePlan, Scheme, TimeGrid, integrate_ode, integrate_sde, simulate_ensemble
from .markov import QMode, build_qmatrix, forward_solve, transition_matrix
from .selfsimilar import ConvergenceError, solve_selfsimilar
from .tree import ConfigError, Tree, TreeConfig, build_tree

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "IntegrationError",
    "ModelKind",
    "NoisePlan",
    "QMode",
    "Scheme",
    "TimeGrid",
    "Tree",
    "TreeConfig",
    "build_qmatrix",
    "build_tree",
    "forward_solve",
    "integrate_ode",
    "integrate_sde",
    "simulate_ensemble",
    "solve_selfsimilar",
    "transition_matrix",
]
