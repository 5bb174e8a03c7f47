"""Monte Carlo solution and numerical verification of path-dependent PDEs.

The value functional of a forward-backward SDE with path-dependent
coefficients is computed by regression Monte Carlo and then checked against
the PDE it should solve, using finite-difference functional derivatives.
"""

from .bsde import (
    BsdeSolution,
    RegressionBasis,
    SingularRegressionError,
    SolverConfig,
    UFunctional,
    difference_quotient_y,
    evaluate_u,
    solve_bsde,
)
from .derivatives import (
    DerivativeConfig,
    NonFiniteEvaluation,
    horizontal_derivative,
    ito_residual,
    vertical_derivative,
    vertical_hessian,
)
from .forward import (
    PathEnsemble,
    ProblemSpec,
    concat_history,
    lipschitz_probe,
    simulate_ensemble,
    simulate_from_increments,
    strong_error,
)
from .functionals import PathFunctional
from .paths import (
    Path,
    PathBatch,
    SimulationGrid,
    d_infinity,
    discretize_n,
    eval_path,
    flat_extension,
    read_path_csv,
    sup_norm,
    vertical_bump,
    write_path_csv,
)
from .problems import ProblemRegistryEntry, get_problem, registry_builtin
from .verify import (
    RegularityProbeConfig,
    VerificationReport,
    discretization_convergence,
    flow_property_check,
    ito_convergence_check,
    moment_probe,
    ppde_residual,
    regularity_probe,
    strong_order_check,
    z_representation_check,
)

__version__ = "0.1.0"
