//! End-to-end experiments: targets, feature visualization, inversion,
//! critical-space estimation and evaluation, written to disk.

mod config;
mod record;
mod run;

pub use config::{CriticalSpaceSettings, ExperimentConfig, ImageConfig, NetworkSource, SampleCounts};
pub use record::{write_samples_csv, RealizationFile, SampleOutcome, SampleRecord, TargetKind};
pub use run::{
    median, run_experiment, select_critical_space, validation_score, Candidate, CriticalSpaceReport, DecompositionFile, ExperimentReport,
    KnownRealization, Manifest, PredictionRecord, Summary, Timings, MAX_FAILURE_FRACTION,
};
