"""Simulation and analysis toolkit for Q-learning with S-shaped value distortion.

A Q-table is an array of shape (s, r) indexed by (state, action); whenever a
flat vector or a matrix row/column index is needed, the canonical flattening
is C-order, i.e. pair (i, v) maps to index i * r + v.
"""

from prospectq.mdp import (
    MdpInstance,
    build_explicit_mdp,
    generate_random_mdp,
    load_instance,
    save_instance,
    step_chain,
)
from prospectq.valuation import (
    NoiseModel,
    RegionPoints,
    SCurve,
    critical_points,
    find_g_and_b1,
    logistic_curve,
    steep_curve,
    tabulated_curve,
    u1_eval,
    u2_eval,
)
from prospectq.bellman import (
    Backend,
    JacobianMatrix,
    OperatorSpec,
    alt_F,
    classical_F,
    classical_fixed_point,
    jacobian,
    operator_F,
    prospect_F,
    vector_field,
)
from prospectq.learner import (
    LearnerConfig,
    RunRecord,
    convex_update,
    epsilon_greedy_select,
    exploration_diagnostic,
    run,
    stepsize,
)
from prospectq.dynamics import (
    Census,
    Equilibrium,
    OdeTrajectory,
    RegionReport,
    TheoremViolation,
    classify,
    extremal_equilibrium,
    find_equilibria,
    integrate,
    mode_box,
    order_structure,
    region_report,
)

__version__ = "0.1.0"
