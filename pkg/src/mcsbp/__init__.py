"""Multi-type continuous-state branching processes.

Mechanism algebra, mean-semigroup spectral theory, the nonlinear log-Laplace
flow, jump-diffusion path simulation, the size-biased spine construction, and
ensemble experiments that verify the almost-sure growth behaviour of the
supercritical regime against exact analytic oracles.
"""

from .mechanism import (
    AtomicMeasure,
    BranchingMechanism,
    MechanismError,
    QuadratureError,
    RadialMeasure,
    XlogxVerdict,
    ZeroMeasure,
    check_xlogx,
    convert_drift,
    evaluate_psi,
    measure_moment,
    sample_jump,
    validate,
)
from .spectral import DecayFit, SpectralData, SpectralError, check_decay, mean_matrix, perron
from .laplace_flow import (
    FlowError,
    FlowSolution,
    ThetaSolution,
    laplace_functional,
    mean_consistency,
    semigroup_check,
    solve_theta,
    solve_v,
    tilted_laplace,
)
from .simulator import (
    PathResult,
    SimConfig,
    SimulationError,
    block_rng,
    detect_extinction,
    simulate_block,
    simulate_path,
    track_martingale,
)
from .spine import (
    GammaResult,
    NuMeasure,
    SpineChain,
    SpineError,
    consistency_triangle,
    gamma_laplace_ensemble,
    nu_measure,
    sample_spine,
    simulate_gamma,
    spine_generator,
    weighted_tilt_estimate,
)
from .harness import (
    EnsembleStats,
    ExperimentError,
    ExperimentReport,
    emit_report,
    run_ensemble,
    slln_experiment,
    xlogx_experiment,
)
from .config import (
    load_config,
    mechanism_from_config,
    mechanism_to_dict,
    reference_mechanism,
    xlogx_pair,
)

__version__ = "0.1.0"
