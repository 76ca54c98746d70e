//! Simulation designs, the precision protocol, ML fitting and data input.

mod config;
mod data;
mod fit;
mod protocol;
mod simulate;

pub use config::Config;
pub use data::{load_csv, read_csv, Dataset, GsmBasis, Schema};
pub use fit::{fit_ml, fit_over_seeds, total_loglik, CovStructure, FitOptions, FitResult};
pub use protocol::{
    benchmark_instance, calibrate_method, ground_truth, scaled_rmse, summarize, time_method, BenchCell, Calibration,
    CalibrationOptions, CalibrationResult, GroundTruthOptions, Tuning,
};
pub use simulate::{draw_effect, draw_sigma, random_instance, simulate, simulate_binomial, simulate_multinomial, wishart, SimDraw, SimSpec};
