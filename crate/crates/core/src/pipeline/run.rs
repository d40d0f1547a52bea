//! Staged orchestration: group → train-prior → occlusion → optimize → eval.
//!
//! Every stage records a hash of its inputs and outputs in `manifest.json`.
//! A stage is skipped when its input hash is unchanged, its outputs are
//! intact, and none of the stages it depends on ran in this invocation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{derive_seed, EvalStageConfig, PipelineConfig};
use super::dataset::{Dataset, HEADER_FILE, RECORDS_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, summarize, MetricReport, MetricSummary};
use crate::flow::{self, FlowConfig, FlowParams, TrainingItem};
use crate::grouping::{build_clusters, knn_group, Cluster, ClusterEntry, DatasetIndex, GroupingConfig};
use crate::kinematics::SceneParams;
use crate::optimizer::{
    mean_occlusion_map, observed_occlusion_map, optimize, LossTerms, MeanOcclusionMap, OptimConfig,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUPS_FILE: &str = "group/clusters.json";
pub const FLOW_FILE: &str = "train-prior/flow.json";
pub const TRAIN_LOG_FILE: &str = "train-prior/losses.json";
pub const OCCLUSION_FILE: &str = "occlusion/mean_occlusion.json";
pub const RESULTS_FILE: &str = "optimize/results.ndjson";
pub const TRACES_FILE: &str = "optimize/traces.csv";
pub const REPORT_FILE: &str = "eval/report.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Retained neighbors per image, by index into the training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupArtifact {
    pub image_ids: Vec<String>,
    /// `(neighbor index, rep distance)`, ascending by distance.
    pub clusters: Vec<Vec<(usize, f64)>>,
}

impl GroupArtifact {
    pub fn from_clusters(index: &DatasetIndex, clusters: &[Cluster]) -> Self {
        GroupArtifact {
            image_ids: index.items.iter().map(|i| i.image_id.clone()).collect(),
            clusters: clusters.iter().map(|c| c.entries.iter().map(|e| (e.index, e.distance)).collect()).collect(),
        }
    }

    /// Rebuilds full clusters against `index`, which must list the same images.
    pub fn to_clusters(&self, index: &DatasetIndex) -> Result<Vec<Cluster>> {
        let ids: Vec<&str> = index.items.iter().map(|i| i.image_id.as_str()).collect();
        if ids != self.image_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format("grouping was computed on a different dataset".into()));
        }
        self.clusters
            .iter()
            .enumerate()
            .map(|(anchor, members)| {
                let entries = members
                    .iter()
                    .map(|&(i, distance)| {
                        let item = index.items.get(i).ok_or_else(|| Error::Format(format!("neighbor {i} out of range")))?;
                        Ok(ClusterEntry {
                            index: i,
                            keypoints: item.keypoints.clone(),
                            camera: item.camera,
                            intrinsics: item.intrinsics,
                            distance,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Cluster { anchor, entries })
            })
            .collect()
    }
}

pub fn stage_group(train: &Dataset, cfg: &GroupingConfig) -> Result<GroupArtifact> {
    let index = train.index();
    let ns = knn_group(&index, cfg)?;
    let clusters = build_clusters(&index, &ns, cfg.drop_distance)?;
    Ok(GroupArtifact::from_clusters(&index, &clusters))
}

pub fn training_items(train: &Dataset, groups: &GroupArtifact) -> Result<Vec<TrainingItem>> {
    let clusters = groups.to_clusters(&train.index())?;
    Ok(train
        .records
        .iter()
        .zip(clusters)
        .map(|(r, cluster)| TrainingItem { condition: r.condition.clone(), cluster })
        .collect())
}

pub fn stage_train(train: &Dataset, groups: &GroupArtifact, cfg: &FlowConfig) -> Result<flow::TrainOutcome> {
    flow::train(&training_items(train, groups)?, cfg)
}

/// Mean occlusion map over every record that carries a scene (ground truth,
/// else its initialization).
pub fn stage_occlusion(train: &Dataset, resolution: usize) -> Result<MeanOcclusionMap> {
    let maps = train
        .records
        .iter()
        .filter_map(|r| r.ground_truth.as_ref().or(r.init.as_ref()).map(|s| (r, s)))
        .map(|(r, scene)| observed_occlusion_map(&train.header.body, &train.header.object, scene, &r.observations(), resolution))
        .collect::<Result<Vec<_>>>()?;
    mean_occlusion_map(&maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub image_id: String,
    pub scene: SceneParams,
    pub diverged: bool,
    pub final_terms: LossTerms,
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Refines every test record from its `init`. Record `i` uses the optimizer
/// seed derived from `cfg.rng_seed` and `i`, so results do not depend on the
/// thread count.
pub fn stage_optimize(
    test: &Dataset,
    flow: Option<&FlowParams>,
    mean: Option<&MeanOcclusionMap>,
    cfg: &OptimConfig,
    threads: usize,
) -> Result<Vec<OptimizeResult>> {
    let run_one = |i: usize| -> Result<OptimizeResult> {
        let rec = &test.records[i];
        let init = rec.init.as_ref().ok_or_else(|| Error::Format(format!("record {} has no init", rec.image_id)))?;
        let cfg = OptimConfig { rng_seed: derive_seed(cfg.rng_seed, i as u64), ..cfg.clone() };
        let (scene, diag) = optimize(&test.header.body, &test.header.object, init, &rec.observations(), flow, mean, &cfg)?;
        Ok(OptimizeResult {
            image_id: rec.image_id.clone(),
            scene,
            diverged: diag.diverged,
            final_terms: diag.final_terms,
            trace: diag.trace,
        })
    };
    let n = test.records.len();
    let threads = match threads {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        t => t,
    }
    .clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(run_one).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<OptimizeResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let run_one = &run_one;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(run_one).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("optimize worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub image_id: String,
    pub init: Option<MetricReport>,
    pub refined: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalStageConfig,
    pub records: Vec<RecordMetrics>,
    pub init: Option<MetricSummary>,
    pub refined: MetricSummary,
    pub diverged: usize,
}

/// Metrics of every result whose record has ground truth.
pub fn stage_eval(test: &Dataset, results: &[OptimizeResult], cfg: &EvalStageConfig) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, _> = test.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let (body, template) = (&test.header.body, &test.header.object);
    let mut records = Vec::new();
    for res in results {
        let rec = by_id.get(res.image_id.as_str()).ok_or_else(|| Error::Format(format!("unknown image {}", res.image_id)))?;
        let Some(gt) = rec.ground_truth.as_ref() else { continue };
        let init = rec.init.as_ref().map(|s| evaluate(s, gt, body, template, cfg.mode, &cfg.metric)).transpose()?;
        let refined = evaluate(&res.scene, gt, body, template, cfg.mode, &cfg.metric)?;
        records.push(RecordMetrics { image_id: res.image_id.clone(), init, refined });
    }
    if records.is_empty() {
        return Err(Error::Empty("records with ground truth"));
    }
    let inits: Option<Vec<MetricReport>> = records.iter().map(|r| r.init).collect();
    let refined: Vec<MetricReport> = records.iter().map(|r| r.refined).collect();
    Ok(EvalReport {
        config: cfg.clone(),
        init: inits.map(|v| summarize(&v)),
        refined: summarize(&refined),
        diverged: results.iter().filter(|r| r.diverged).count(),
        records,
    })
}

pub fn results_ndjson(results: &[OptimizeResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<OptimizeResult>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn traces_csv(results: &[OptimizeResult]) -> String {
    let mut out = String::from("image_id,step,objective\n");
    for r in results {
        for (i, v) in r.trace.iter().enumerate() {
            out.push_str(&format!("{},{i},{v:e}\n", r.image_id));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    /// Output path (relative to the run directory) → content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        match fs::read_to_string(dir.join(MANIFEST_FILE)) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(MANIFEST_FILE), (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub stages: Vec<(&'static str, StageStatus)>,
    pub report: EvalReport,
}

impl RunSummary {
    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, st)| *st)
    }
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: Manifest,
    ran: BTreeSet<&'static str>,
    log: Vec<(&'static str, StageStatus)>,
}

impl Runner<'_> {
    fn hash_of(&self, rel: &str) -> Option<String> {
        fs::read(self.dir.join(rel)).ok().map(|b| sha256_hex(&b))
    }

    fn output_hash(&self, stage: &str, rel: &str) -> Result<String> {
        self.manifest
            .stages
            .get(stage)
            .and_then(|s| s.outputs.get(rel).cloned())
            .ok_or_else(|| Error::Format(format!("stage {stage} has no output {rel}")))
    }

    fn fresh(&self, stage: &str, input_hash: &str, deps: &[&str]) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else { return false };
        rec.input_hash == input_hash
            && deps.iter().all(|d| !self.ran.contains(d))
            && rec.outputs.iter().all(|(rel, h)| self.hash_of(rel).as_deref() == Some(h.as_str()))
    }

    /// Runs `body` unless the stage is fresh; `body` returns (relative path, bytes) pairs.
    fn stage(
        &mut self,
        name: &'static str,
        deps: &[&str],
        input: &impl Serialize,
        body: impl FnOnce() -> Result<Vec<(&'static str, Vec<u8>)>>,
    ) -> Result<()> {
        let input_hash = sha256_hex(&serde_json::to_vec(&(name, input))?);
        if self.fresh(name, &input_hash, deps) {
            info!("{name}: up to date");
            self.log.push((name, StageStatus::Skipped));
            return Ok(());
        }
        info!("{name}: running");
        let outputs = body().map_err(|e| Error::Stage { stage: name, source: Box::new(e) })?;
        let mut hashes = BTreeMap::new();
        for (rel, bytes) in outputs {
            write_file(&self.dir.join(rel), &bytes)?;
            hashes.insert(rel.to_string(), sha256_hex(&bytes));
        }
        self.manifest.stages.insert(name.to_string(), StageRecord { input_hash, outputs: hashes });
        self.manifest.save(self.dir)?;
        self.ran.insert(name);
        self.log.push((name, StageStatus::Ran));
        Ok(())
    }
}

fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [HEADER_FILE, RECORDS_FILE] {
        let bytes = fs::read(dir.join(f))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Executes every stage under `out_dir`, skipping those whose inputs are unchanged.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut r = Runner { dir: out_dir, manifest: Manifest::load(out_dir)?, ran: BTreeSet::new(), log: Vec::new() };
    let load = |p: &PathBuf| Dataset::read(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())));
    let train_hash = dataset_hash(&cfg.data.train)?;
    let test_hash = dataset_hash(&cfg.data.test)?;
    let mut train: Option<Dataset> = None;
    let mut get_train = || -> Result<Dataset> {
        if train.is_none() {
            train = Some(load(&cfg.data.train)?);
        }
        Ok(train.clone().expect("loaded"))
    };

    r.stage("group", &[], &(&train_hash, &cfg.grouping), || {
        let groups = stage_group(&get_train()?, &cfg.grouping)?;
        Ok(vec![(GROUPS_FILE, serde_json::to_vec(&groups)?)])
    })?;

    let groups_hash = r.output_hash("group", GROUPS_FILE)?;
    r.stage("train-prior", &["group"], &(&train_hash, &groups_hash, &cfg.flow), || {
        let groups: GroupArtifact = serde_json::from_slice(&fs::read(out_dir.join(GROUPS_FILE))?)?;
        let outcome = stage_train(&get_train()?, &groups, &cfg.flow)?;
        if outcome.diverged {
            return Err(Error::NonFinite("flow training"));
        }
        Ok(vec![
            (FLOW_FILE, outcome.params.to_checkpoint_json()?.into_bytes()),
            (TRAIN_LOG_FILE, serde_json::to_vec_pretty(&outcome.epoch_losses)?),
        ])
    })?;

    r.stage("occlusion", &[], &(&train_hash, &cfg.occlusion), || {
        let mean = stage_occlusion(&get_train()?, cfg.occlusion.resolution)?;
        Ok(vec![(OCCLUSION_FILE, serde_json::to_vec(&mean)?)])
    })?;

    let flow_hash = r.output_hash("train-prior", FLOW_FILE)?;
    let occ_hash = r.output_hash("occlusion", OCCLUSION_FILE)?;
    let test = load(&cfg.data.test)?;
    r.stage("optimize", &["train-prior", "occlusion"], &(&test_hash, &flow_hash, &occ_hash, &cfg.optimize), || {
        let flow = FlowParams::load(&out_dir.join(FLOW_FILE))?;
        let mean: MeanOcclusionMap = serde_json::from_slice(&fs::read(out_dir.join(OCCLUSION_FILE))?)?;
        let results = stage_optimize(&test, Some(&flow), Some(&mean), &cfg.optimize, cfg.threads)?;
        Ok(vec![(RESULTS_FILE, results_ndjson(&results)?.into_bytes()), (TRACES_FILE, traces_csv(&results).into_bytes())])
    })?;

    let results_hash = r.output_hash("optimize", RESULTS_FILE)?;
    r.stage("eval", &["optimize"], &(&test_hash, &results_hash, &cfg.eval), || {
        let results = read_results(&out_dir.join(RESULTS_FILE))?;
        let report = stage_eval(&test, &results, &cfg.eval)?;
        Ok(vec![(REPORT_FILE, (serde_json::to_string_pretty(&report)? + "\n").into_bytes())])
    })?;

    let report: EvalReport = serde_json::from_slice(&fs::read(out_dir.join(REPORT_FILE))?)?;
    Ok(RunSummary { stages: r.log, report })
}
