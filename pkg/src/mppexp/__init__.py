"""Maximum-principle-preserving exponential cut-off solvers for parabolic and Allen-Cahn equations."""
from .gauss_lobatto import ReferenceElement, build_reference_element, lagrange_eval
from .grid_fem import (BC, DiscreteOperator, Grid, assemble_operators, build_grid,
                       discrete_inner, discrete_norm, evaluate, interpolate)
from .exp_action import Backend, ExpEvaluator, build_evaluator, phi
from .potentials import (DomainViolation, PotentialKind, PotentialSpec, eval_f, eval_f_nodal,
                         flory_huggins, ginzburg_landau, linear_forcing, solve_alpha)
from .time_steppers import (Cutoff, Forcing, Reaction, RunResult, SchemeConfig, Status, StepHistory,
                            disabled, etd_rk2_step, exp_multistep_step, lagrange_extrapolation_coeffs,
                            one_sided, reaction_from_potential, solve, starting_values, two_sided)

__version__ = "0.1.0"
