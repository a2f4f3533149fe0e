//! Experiment configuration and end-to-end orchestration: data, poisons,
//! training, probes, distances and landscape export.

mod config;
mod run;
mod table;

pub use config::{DataConfig, ExperimentConfig, LandscapeConfig, PoisonConfig, TapConfig, CONFIG_VERSION};
pub use run::{
    run_dir, run_experiment, run_landscape, training_set, write_bench, BenchRow, Experiment, MethodDetail, Prepared,
    RunOutput, RunSummary, VANILLA,
};
pub use table::{read_table, table_check, RowCheck, TableRow, TableVerdict, TABLE_TOLERANCE};
