"""Config-driven simulator of the LLS agent-based stock market."""

from .analysis import (
    SeriesStats,
    autocorrelation,
    d_gamma,
    excess_kurtosis,
    group_wealth,
    log_returns,
    normal_quantile,
    qq_data,
    series_stats,
)
from .clearance import (
    ClearanceResult,
    StepRecord,
    excess_demand,
    simulation_step,
    solve_price_explicit,
    solve_price_iterative,
)
from .errors import (
    ClearanceError,
    ConfigError,
    DomainError,
    LlsError,
    NumericError,
    ParameterError,
)
from .harness import (
    SimulationConfig,
    SimulationOutput,
    experiment_finite_size,
    experiment_rng_quality,
    experiment_tolerance_sweep,
    parse_config,
    replay,
    run_simulation,
    run_with_replicas,
    write_csv,
)
from .model import (
    AgentPool,
    MarketState,
    ModelParams,
    PRESETS,
    apply_gamma_noise,
    cutoff_H,
    dividend_step,
    init_state,
    optimal_gamma,
    preset_3groups,
    preset_basic,
    scale_to_agents,
    stock_return,
    utility_derivative,
    wealth_step,
)
from .rng import (
    RngAlgorithm,
    RngStream,
    derive_replica_seed,
    randu_next,
    seed_stream,
    splitmix64,
)

__version__ = "0.1.0"
