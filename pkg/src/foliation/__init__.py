"""Stable and unstable foliations near normally hyperbolic equilibria of ``u' + A(u) u = F(u)``."""

__version__ = "0.1.0"

from .chart import EquilibriumChart, build_chart, eval_phi_derivative, verify_chart
from .flow import FlowResult, estimate_decay_rate, integrate, verify_fiber
from .lpsolver import (
    FiberRequest,
    FiberSolution,
    FoliationSetup,
    GridSpec,
    TrajectoryGrid,
    assemble_Hs,
    assemble_Hu,
    decompose_initial_value,
    fiber_tangent,
    recover_initial_values,
    setup_foliation,
    solve_stable_fiber,
    solve_unstable_fiber,
)
from .model import ProblemModel, eval_rhs, eval_rhs_jacobian, get_problem, problem_names
from .normalform import eval_G, eval_R, from_normal_coords, make_context, to_normal_coords
from .spectral import (
    NHReport,
    SpectralSplit,
    check_normally_hyperbolic,
    classify_linearization,
    linearize,
    split_spectrum,
    stable_semigroup,
    unstable_group,
)
