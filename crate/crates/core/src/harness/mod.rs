//! Trial runner, Monte Carlo driver and error statistics.

pub mod metrics;
pub mod montecarlo;
pub mod trial;

pub use metrics::{empirical_cdf, median, percentile, Distribution};
pub use montecarlo::{run_montecarlo, write_csv, ModeSummary, MonteCarloReport};
pub use trial::{
    evaluate, prepare_trial, run_back_end, run_trial, run_trial_modes, run_trial_with, Mode, PathSource,
    PreparedTrial, StageFailure, TrialResult,
};
