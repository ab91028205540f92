//! Experiment configs, synthetic data, the staged pipeline and reports.

pub mod config;
pub mod data;
pub mod manifest;
pub mod pipeline;
pub mod stats;

pub use config::{
    DatasetKind, DatasetSpec, DiffusionSpec, ExperimentConfig, ExtractionSpec, MetricSpec,
    NetSpec, PseudoSpec, SamplerSpec, TeacherSpec, SCHEMA_VERSION,
};
pub use data::{synth_dataset, Dataset};
pub use manifest::{Artifact, RunManifest, StageRecord, StageStatus, MANIFEST_FILE};
pub use pipeline::{
    average_reports, compare_variants, lambda_key, run_side, sweep_lambda, ArgmaxRow,
    CompareRow, CompareTable, Pipeline, RunSummary, SweepTable, TierAverage, Variant,
};
pub use stats::{exceeds_band, MarginTest, Proportion, Z95};
