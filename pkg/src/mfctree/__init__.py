"""Particle and scenario-tree solver and verifier for mean field control with common noise."""
__version__ = "0.1.0"

from .measure_core import EmpiricalMeasure, mix, pushforward, second_moment, wasserstein2_1d
from .model import (ConfigurationError, ProblemSpec, check_convexity_margin, family_names, make_problem,
                    register_family)
from .dynamics import (ControlField, NoiseBundle, ParticleEnsemble, ScenarioTree, TimeGrid, build_tree, draw_noise,
                       sample_initial_particles, simulate_forward)
from .adjoint import AdjointField, cost_gradient, solve_bsde
from .hamiltonian import argmin_lagrangian, hamiltonian
from .solver import MFCSolver, OptimalSolution, SolvabilityError, SolveOptions, solve_feedback, solve_mfc
from .lq_oracle import LQSpec, lqr_tree_solve, riccati_solve
from .derivatives import first_derivative, second_directional, tagged_solve

__all__ = [
    "EmpiricalMeasure", "mix", "pushforward", "second_moment", "wasserstein2_1d",
    "ConfigurationError", "ProblemSpec", "check_convexity_margin", "family_names", "make_problem", "register_family",
    "ControlField", "NoiseBundle", "ParticleEnsemble", "ScenarioTree", "TimeGrid", "build_tree", "draw_noise",
    "sample_initial_particles", "simulate_forward",
    "AdjointField", "cost_gradient", "solve_bsde", "argmin_lagrangian", "hamiltonian",
    "MFCSolver", "OptimalSolution", "SolvabilityError", "SolveOptions", "solve_feedback", "solve_mfc",
    "LQSpec", "lqr_tree_solve", "riccati_solve", "first_derivative", "second_directional", "tagged_solve",
]
