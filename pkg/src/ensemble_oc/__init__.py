"""Average-cost ensemble optimal control over uncertain parameters.

The library discretizes a parameter measure into a convex combination of
point masses, propagates one trajectory per parameter atom, solves the
resulting finite average-cost problem with a damped forward-backward
Pontryagin sweep, and checks the stationarity conditions of a candidate
solution as numerical certificates.
"""

from ensemble_oc.measure import (
    DiracApproximationSequence,
    FiniteSupportMeasure,
    ParameterSpace,
    ProbabilityMeasure,
    build_sequence,
    discretize,
    integrate,
    weak_star_bound,
    weak_star_gap,
)
from ensemble_oc.system import (
    ConstraintSet,
    ControlFunction,
    ControlSet,
    ControlSystem,
    DynamicsBlowUp,
    RegularityData,
    TimeGrid,
    TrajectoryEnsemble,
    average_cost,
    ekeland_distance,
    gronwall_bound,
    propagate,
    propagate_ensemble,
    sensitivity_check,
    w11_distance,
)
from ensemble_oc.adjoint import (
    CostateEnsemble,
    averaged_hamiltonian,
    backward_adjoint,
    backward_adjoint_ensemble,
    maximize_hamiltonian,
    terminal_costate,
)
from ensemble_oc.solver import (
    EnumerationBudgetExceeded,
    SolveConfig,
    SolveResult,
    brute_force_oracle,
    refine,
    solve,
)
from ensemble_oc.verify import (
    Certificate,
    ResidualReport,
    Tolerances,
    check_adjoint,
    check_dynamics,
    check_maximality,
    check_nontriviality,
    check_transversality,
    verify_all,
)

__version__ = "0.1.0"
