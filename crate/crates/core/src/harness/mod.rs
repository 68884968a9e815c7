//! Sweeps over noise strength, placement and seed, with an append-only
//! results log that lets interrupted sweeps resume.

mod config;
mod fit;
mod records;
mod sweep;

pub use config::{default_grid, ExperimentConfig, GridSpec};
pub use fit::{fit_all, read_walking_mus, seed_mean_stderr, write_fit_outputs, write_fits_csv, CurveFit, CurveKey};
pub use records::{
    read_records, write_records, Experiment, ExperimentRecord, IndexEntry, ResultsStore, CODE_VERSION, INDEX_FILE,
    RECORDS_FILE,
};
pub use sweep::{
    run_global_sweep, run_global_sweep_with, run_mixed_grid, run_mixed_grid_with, run_walking_sweep,
    run_walking_sweep_with, train_clean, SweepContext,
};
