"""condwalk: biased random walks among i.i.d. positive random conductances.

Reproducible lazy environments on Z^d, quenched walk simulation, trap
geometry (normal edges, open/good vertices, bad clusters), exact finite
network analysis (harmonic solves, trap sealing, Dirichlet eigenvalues),
regeneration statistics, and the Monte Carlo experiments tying them together
(speed, sub-ballistic exponent, box exits, backtrack tails, idealized traps).
"""

from .environment import (
    ConductanceLaw,
    DEFAULT_SEED,
    EdgeKey,
    EnvironmentSpec,
    NotAdjacentError,
    OverflowRiskError,
    base_conductance,
    base_conductance_between,
    canonical_edge,
    derive_seed,
    full_conductance,
    local_weights,
    stationary_weight,
)
from .experiments import (
    BacktrackTable,
    ExitTable,
    ExperimentConfig,
    ExponentEstimate,
    MIN_BATCHES,
    NonPositiveLevelError,
    PRESETS,
    RegenSurvey,
    SpeedEstimate,
    TrapOccupation,
    TrapSamples,
    backtrack_tail_experiment,
    dyadic_checkpoints,
    edge_sojourn_times,
    estimate_exponent,
    estimate_speed,
    exit_probability_experiment,
    exponent_from_levels,
    homogeneous_speed,
    idealized_trap_sampler,
    pair_sojourn_exact,
    preset_config,
    regeneration_survey,
    trap_occupation_experiment,
    write_outputs,
    x1_survival_exact,
)
from .geometry import (
    AnalysisParams,
    Classifier,
    ClusterReport,
    bad_cluster,
    cluster_width_survey,
    is_good,
    vertex_is_open,
)
from .network import (
    ConvergenceFailureError,
    DisconnectedNetworkError,
    FiniteNetwork,
    SingularNetworkError,
    TruncatedTrapError,
    build_network,
    dirichlet_eigenvalue,
    effective_resistance,
    escape_probability,
    expected_visits,
    harmonic_voltage,
    induced_walk_equivalence_check,
    mean_return_time,
    merged_network,
    seal_traps,
)
from .regeneration import (
    InsufficientDataError,
    RegenChainStats,
    RegenRecord,
    detect_regenerations,
    ladder_times,
    open_ladder_index,
    regen_chain_stats,
    replay_def_s,
    survival_slope,
    write_records_csv,
)
from .walk import (
    Box,
    Trajectory,
    exit_classification,
    hitting_time,
    min_level,
    run,
    transition_distribution,
)

__version__ = "0.1.0"
