"""Simulation and verification toolkit for stochastic delay differential equations.

Controlled couplings with change-of-measure ledgers, ergodic-rate
diagnostics over truncated Holder metrics, and Monte Carlo sensitivity
estimators with damped derivative processes.
"""

__version__ = "0.1.0"

from .core import (
    AssumptionReport,
    GridMismatchError,
    PathGrid,
    Segment,
    SddeModel,
    SimulationError,
    TimeGrid,
    em_simulate,
    em_simulate_batch,
    em_step,
    segment_at,
    sup_dist,
    verify_assumptions,
)
from .girsanov import (
    GirsanovLedger,
    accumulate,
    diff_lower_bound,
    importance_weight,
    pinsker_tv_bound,
)
from .coupling import (
    ContractionReport,
    CoupledRun,
    CouplingControl,
    MetricSpec,
    approximation_study,
    contraction_estimate,
    d_metric,
    n0_bound,
    run_controlled,
    run_controlled_batch,
    run_synchronous,
    run_synchronous_batch,
    support_probe,
)
from .ergodicity import (
    LyapunovSpec,
    PhiFunction,
    RateFunctions,
    empirical_coupling_distance,
    kr_dual_value,
    lyapunov_catalog,
    lyapunov_drift_check,
    rate_bound,
    rate_functions,
    skeleton,
    stationary_estimate,
)
from .sensitivity import (
    GradientEstimate,
    SensitivityRun,
    decay_diagnostic,
    estimate_gradient,
    fd_oracle,
    solve_U,
    weight_integral,
)
from .diagnostics import (
    TailBoundSpec,
    tail_bound_check,
    tail_excess_threshold,
)
from .models import catalog_ids, make_model, standard_probe_cloud
from .seeding import derive_seed, rng_for
