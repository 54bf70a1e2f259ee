"""Random walks in random environment, directed trap models and their particle systems."""

__version__ = "0.1.0"

from .env import (EnvDistribution, Environment, LadderStats, b_coeff, b_column, b_row, beta_k,
                  compute_potential_and_ladders, g_function, rescaled_trap_env, sample_block_stats,
                  sample_environment, solve_kappa)
from .errors import (AssumptionViolated, BlockOverflow, BufferExhausted, ConfigError, DegenerateWindow,
                     InsufficientSamples, NoRoot, RwreLabError, StiffnessWarning, SupportNotCovered,
                     WindowExit)
from .particles import (ParticleConfiguration, SpaceTimeIntegral, TestFunction, evolve_rwre_system,
                        evolve_trap_system, init_configuration, space_time_integral)
from .stats import (ExperimentResult, TailReport, hill_tail_index, hydro_experiment_rwre,
                    hydro_experiment_traps, ks_distance, laplace_transform_check, speed_check)
from .trap import (HoldingTimes, TrapEnvironment, draw_holding_times, sample_poisson_traps, sigma_mass,
                   truncate_env, validate_env, z_backward, z_forward)
from .uw import (ProfileFunction, UwSolution, dual_pairing_check, duw_dt, estimate_uw_mc, solve_uw_ode,
                 total_variation)
