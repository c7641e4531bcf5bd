//! Experiment harness: configs, synthetic data, seeded runs, sweeps, reports,
//! the modular baselines and the binary artifact container.

pub mod config;
pub mod container;
pub mod experiment;
pub mod modular;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod synth;

pub use config::{Channel, DictionarySource, ExperimentConfig};
pub use experiment::{
    append_records, read_records, run_experiment, run_seed, seed_features, ExperimentData, FeatureTable, ResultRecord,
    RunProvenance, SeedOutcome,
};
pub use modular::{run_modular_comparison, ModularComparison};
pub use pipeline::{Dataset, FittedPipeline};
pub use report::emit_report;
pub use sweep::{sweep, Axis};
pub use synth::{make_synthetic, synth_images, SynthSpec};
