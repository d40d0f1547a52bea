//! Pipeline configuration (TOML) and per-stage seed derivation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, EvalMode};
use crate::flow::FlowConfig;
use crate::grouping::GroupingConfig;
use crate::optimizer::OptimConfig;

/// Stage names in execution order; the index is the seed counter.
pub const STAGES: [&str; 5] = ["group", "train-prior", "occlusion", "optimize", "eval"];

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `counter`-th consumer under `master`.
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    splitmix64(master ^ splitmix64(counter))
}

/// Seed of a named stage.
pub fn stage_seed(master: u64, stage: &str) -> Result<u64> {
    STAGES
        .iter()
        .position(|s| *s == stage)
        .map(|i| derive_seed(master, i as u64))
        .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {stage}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory of the dataset the prior is learned from.
    pub train: PathBuf,
    /// Directory of the dataset to refine and evaluate.
    pub test: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: PathBuf::from("data/train"), test: PathBuf::from("data/test") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    pub resolution: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { resolution: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStageConfig {
    pub mode: EvalMode,
    #[serde(flatten)]
    pub metric: EvalConfig,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig { mode: EvalMode::WildHoi, metric: EvalConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; when set it overrides every per-section `rng_seed`.
    pub seed: Option<u64>,
    pub threads: usize,
    pub data: DataConfig,
    pub grouping: GroupingConfig,
    pub flow: FlowConfig,
    pub occlusion: OcclusionConfig,
    pub optimize: OptimConfig,
    pub eval: EvalStageConfig,
}

/// The default configuration with every field documented.
pub const DEFAULT_CONFIG_TOML: &str = r#"# Master seed. When present, every section's rng_seed is derived from it.
# seed = 0

# Worker threads for the optimize stage (0 = all available cores).
threads = 0

[data]
# Dataset directories (header.json + records.ndjson).
train = "data/train"
test = "data/test"

[grouping]
# Cluster size.
k = 8
# Refinement iterations.
n_iter = 10
# Largest flattened distance a swap candidate may have to any member.
sim_threshold = 20.0
# Neighbors farther than this (meters) are dropped from a cluster.
drop_distance = 0.5
rng_seed = 0
# Swap rule: "anchored" or "compactness".
criterion = "anchored"

[flow]
# Number of flow steps.
depth = 8
# Hidden units of each coupling conditioner.
width = 64
# 3 * (keypoints + 1).
input_dim = 93
# Length of the conditioning vector.
cond_dim = 60
# Std of the noise added to training targets.
dequant_sigma = 0.01
lr = 0.0001
epochs = 30
# Neighbors per gradient step.
batch_size = 16
rng_seed = 0

[occlusion]
# Render grid side length.
resolution = 256

[optimize]
# Virtual cameras.
m = 8
# Object-only steps.
phase1_steps = 200
# Joint steps over body, object and cameras.
phase2_steps = 300
step_size = 0.01
rng_seed = 0
# Pair weight placement in the contact loss: "inside" or "outside".
contact_weighting = "inside"

[optimize.weights]
lambda_j = 0.01
lambda_coor = 0.1
lambda_norm = 0.01
lambda_prior = 0.1
lambda_contact = 1.0
# Contact threshold on the occlusion product.
eta = 0.3

[eval]
# "wild_hoi" (pelvis-rooted) or "behave" (Procrustes-aligned).
mode = "wild_hoi"
# Surface points per mesh.
samples = 10000
rng_seed = 0
# Allow scale in the alignment.
with_scale = false
"#;

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        self.flow.validate()?;
        self.optimize.validate()?;
        if self.occlusion.resolution == 0 || self.eval.metric.samples == 0 {
            return Err(Error::InvalidConfig("occlusion resolution and eval samples must be positive".into()));
        }
        Ok(())
    }

    /// Applies the master seed, if any, to every section.
    pub fn resolved(mut self) -> Self {
        if let Some(master) = self.seed {
            let seed = |name| stage_seed(master, name).expect("known stage");
            self.grouping.rng_seed = seed("group");
            self.flow.rng_seed = seed("train-prior");
            self.optimize.rng_seed = seed("optimize");
            self.eval.metric.rng_seed = seed("eval");
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.resolved()
    }
}
