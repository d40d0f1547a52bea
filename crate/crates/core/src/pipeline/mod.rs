//! Dataset formats, the synthetic generator and staged orchestration.

pub mod config;
pub mod dataset;
pub mod run;
pub mod synth;

pub use config::{PipelineConfig, DEFAULT_CONFIG_TOML};
pub use dataset::{Dataset, DatasetHeader, DatasetRecord};
pub use run::{run_pipeline, EvalReport, RunSummary, StageStatus};
pub use synth::{synth_generate, SyntheticFamilyConfig, SyntheticSuite};
