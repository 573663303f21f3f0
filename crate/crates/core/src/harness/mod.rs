//! Experiment configuration, drivers and result files.

mod config;
pub mod container;
mod corpus;
mod experiments;
mod report;

pub use config::{
    default_kappas, load_config, parse_config, parse_kappas, ExperimentConfig, PRECISION_ENV,
};
pub use corpus::{Corpus, BUNDLED_CORPUS};
pub use experiments::{
    check_divergence_monotone, default_tolerance, gen_matrix, mean_over_seeds, partition_rows,
    plain_eval_loss, run_bench, run_equivalence, run_kappa_sweep, run_partition_report,
    run_train_toy, run_training, EquivalenceOutcome, TrainingRun, SWEEP_METRICS,
};
pub use report::{read_report, write_report, ExperimentReport, ReportRow, CSV_HEADER};
