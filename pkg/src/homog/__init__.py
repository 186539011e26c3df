"""Numerical laboratory for balanced difference operators in random media.

The package builds i.i.d. or periodized diagonal coefficient fields on the
integer lattice, assembles the associated non-divergence form difference
operators, solves corrector and boundary-value problems matrix-free, and
measures effective tensors, corrector growth, and quantitative
homogenization rates against their predicted scalings.
"""

from .environment import (
    DistributionSpec,
    EllipticityError,
    EnvironmentField,
    PsiSpec,
    psi_eval,
    sample_environment,
)
from .harness import (
    ExperimentConfig,
    ExperimentError,
    ExpansionReport,
    Polynomial,
    RatePoint,
    RateReport,
    TensorReport,
    emit_report,
    expansion_residual,
    fit_powerlaw,
    manufactured_source,
    run_rate_experiment,
    verify_tensors,
)
from .homogenize import (
    CorrectorSet,
    EnsembleStats,
    TensorStats,
    amplitude,
    compute_correctors,
    effective_stats,
    flux_grids,
    green_total_mass,
    higher_corrector_local,
    higher_corrector_stationary,
    reflected_stats_pair,
    solve_corrector,
    tensor_stats,
    weighted_mean,
)
from .lattice import (
    GridDomain,
    GridFunction,
    build_ball,
    build_box,
    build_torus,
    differences,
    dump_grid,
    load_grid,
    unit_directions,
)
from .operator import (
    LinearProblem,
    apply_L,
    assemble_adjoint,
    assemble_dirichlet,
    assemble_green_local,
    assemble_killed,
    assemble_resolvent,
    assemble_torus_operator,
    cutoff_eta,
    cutoff_eta0,
    green_box_half_width,
)
from .solver import (
    SolveResult,
    SolverConfig,
    invariant_density,
    solve_dense_oracle,
    solve_iterative,
)
from .walk import (
    QcltEstimate,
    WalkSummary,
    WindowExitError,
    chain_average_a,
    occupation_density,
    qclt_estimate,
    simulate,
)

__version__ = "0.1.0"
