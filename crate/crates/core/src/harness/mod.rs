//! Multi-initialization experiments: configuration, sweeps over methods and
//! rate fitting of the optimality gap.

pub mod config;
pub mod fit;
pub mod sweep;

pub use config::{ExperimentConfig, StopSettings};
pub use fit::{fit_points, fit_rate, RateFit, RateModel, FIT_FLOOR, MIN_FIT_POINTS, TRANSIENT_FRACTION};
pub use sweep::{
    random_initializations, reference_value, run_method, run_sweep, write_trajectory_csv, MethodSummary, RunSummary,
    SweepSummary,
};
