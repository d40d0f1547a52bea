use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use hoi_prior::annotation::{solve_object_pose, PartKeypointAnnotation, PartPnpConfig};
use hoi_prior::error::Error;
use hoi_prior::evaluation::EvalMode;
use hoi_prior::flow::FlowParams;
use hoi_prior::kinematics::{ObjectTemplate, StickBodyModel};
use hoi_prior::optimizer::MeanOcclusionMap;
use hoi_prior::pipeline::run::{self, GroupArtifact};
use hoi_prior::pipeline::{run_pipeline, synth_generate, Dataset, PipelineConfig, SyntheticFamilyConfig};
use hoi_prior::projection::Intrinsics;

#[derive(Parser)]
#[command(name = "hoi", version, about = "Learn a human-object spatial prior from 2D keypoints and refine 3D poses with it")]
struct Cli {
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for optimization (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test suite.
    Synth(SynthArgs),
    /// Group training images by ray consistency.
    Group(GroupArgs),
    /// Train the conditional flow prior.
    TrainPrior(TrainArgs),
    /// Average occlusion maps over a dataset.
    Occlusion(OcclusionArgs),
    /// Refine every record of a dataset from its initialization.
    Optimize(OptimizeArgs),
    /// Recover an object pose from part-labelled clicks.
    AnnotateSolve(AnnotateArgs),
    /// Score refined scenes against ground truth.
    Eval(EvalArgs),
    /// Run every stage, skipping those whose inputs are unchanged.
    Run,
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    families: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    /// Keypoint pixel noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct GroupArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Grouping output; defaults to `<out-dir>/group/clusters.json`.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dequant_sigma: Option<f64>,
}

#[derive(Args)]
struct OcclusionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    occlusion: Option<PathBuf>,
    /// Virtual cameras.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Args)]
struct AnnotateArgs {
    /// JSON file with `intrinsics` and `annotation` fields.
    #[arg(long)]
    input: PathBuf,
    /// Dataset whose object template to use; the built-in template otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    starts: usize,
    /// Enables the soft-min refinement at this temperature.
    #[arg(long)]
    softmin_temp: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Optimization results; defaults to `<out-dir>/optimize/results.ndjson`.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EvalMode>,
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    match s {
        "behave" => Ok(EvalMode::Behave),
        "wild_hoi" | "wildhoi" => Ok(EvalMode::WildHoi),
        _ => Err(format!("unknown mode {s}; expected behave or wild_hoi")),
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotateInput {
    intrinsics: Intrinsics,
    annotation: PartKeypointAnnotation,
}

/// Marker for results that finished but went numerically wrong.
#[derive(Debug)]
struct Diverged(String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "numerical divergence: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Synth(a) => {
            let mut sc = SyntheticFamilyConfig::default();
            if let Some(seed) = cli.seed {
                sc.rng_seed = seed;
            }
            sc.n_families = a.families.unwrap_or(sc.n_families);
            sc.n_scenes = a.scenes.unwrap_or(sc.n_scenes);
            sc.views_per_scene = a.views.unwrap_or(sc.views_per_scene);
            sc.test_scenes = a.test_scenes.unwrap_or(sc.test_scenes);
            sc.keypoint_noise = a.noise.unwrap_or(sc.keypoint_noise);
            let suite = synth_generate(&sc, &StickBodyModel::standard(), &ObjectTemplate::standard())?;
            suite.train.write(&out.join("train"))?;
            suite.test.write(&out.join("test"))?;
            println!("{} training and {} test records in {}", suite.train.records.len(), suite.test.records.len(), out.display());
        }
        Command::Group(a) => {
            if let Some(k) = a.k {
                cfg.grouping.k = k;
            }
            let groups = run::stage_group(&read_dataset(&a.dataset)?, &cfg.grouping)?;
            let sizes: usize = groups.clusters.iter().map(Vec::len).sum();
            write(&out.join(run::GROUPS_FILE), serde_json::to_vec(&groups)?)?;
            println!("{} clusters, {:.2} neighbors on average", groups.clusters.len(), sizes as f64 / groups.clusters.len().max(1) as f64);
        }
        Command::TrainPrior(a) => {
            let f = &mut cfg.flow;
            f.depth = a.depth.unwrap_or(f.depth);
            f.width = a.width.unwrap_or(f.width);
            f.epochs = a.epochs.unwrap_or(f.epochs);
            f.lr = a.lr.unwrap_or(f.lr);
            f.dequant_sigma = a.dequant_sigma.unwrap_or(f.dequant_sigma);
            let groups_path = a.groups.clone().unwrap_or_else(|| out.join(run::GROUPS_FILE));
            let groups: GroupArtifact = serde_json::from_slice(&fs::read(&groups_path).with_context(|| format!("reading {}", groups_path.display()))?)?;
            let outcome = run::stage_train(&read_dataset(&a.dataset)?, &groups, &cfg.flow)?;
            write(&out.join(run::FLOW_FILE), outcome.params.to_checkpoint_json()?)?;
            write(&out.join(run::TRAIN_LOG_FILE), serde_json::to_vec_pretty(&outcome.epoch_losses)?)?;
            if let Some(last) = outcome.epoch_losses.last() {
                println!("final epoch mean NLL {last:.4}");
            }
            if outcome.diverged {
                return Err(Diverged("flow training".into()).into());
            }
        }
        Command::Occlusion(a) => {
            let res = a.resolution.unwrap_or(cfg.occlusion.resolution);
            let mean = run::stage_occlusion(&read_dataset(&a.dataset)?, res)?;
            write(&out.join(run::OCCLUSION_FILE), serde_json::to_vec(&mean)?)?;
            println!("averaged {} occlusion maps", mean.count);
        }
        Command::Optimize(a) => {
            if let Some(m) = a.m {
                cfg.optimize.m = m;
            }
            let flow = a.flow.as_deref().map(FlowParams::load).transpose()?;
            let mean: Option<MeanOcclusionMap> = match &a.occlusion {
                Some(p) => Some(serde_json::from_slice(&fs::read(p)?)?),
                None => None,
            };
            let results = run::stage_optimize(&read_dataset(&a.dataset)?, flow.as_ref(), mean.as_ref(), &cfg.optimize, cfg.threads)?;
            write(&out.join(run::RESULTS_FILE), run::results_ndjson(&results)?)?;
            write(&out.join(run::TRACES_FILE), run::traces_csv(&results))?;
            let diverged = results.iter().filter(|r| r.diverged).count();
            println!("refined {} records", results.len());
            if diverged > 0 {
                return Err(Diverged(format!("{diverged} of {} records", results.len())).into());
            }
        }
        Command::AnnotateSolve(a) => {
            let input: AnnotateInput = serde_json::from_str(&fs::read_to_string(&a.input)?).context("parsing annotation input")?;
            let template = match &a.dataset {
                Some(d) => read_dataset(d)?.header.object,
                None => ObjectTemplate::standard(),
            };
            let pnp = PartPnpConfig {
                starts: a.starts,
                softmin_temperature: a.softmin_temp,
                rng_seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let sol = solve_object_pose(&template, &input.annotation, &input.intrinsics, &pnp)?;
            write(&out.join("annotate/pose.json"), serde_json::to_vec_pretty(&sol.pose)?)?;
            println!("mean residual {:.3} px (start {})", sol.mean_residual_px, sol.best_start);
        }
        Command::Eval(a) => {
            if let Some(mode) = a.mode {
                cfg.eval.mode = mode;
            }
            let path = a.results.clone().unwrap_or_else(|| out.join(run::RESULTS_FILE));
            let results = run::read_results(&path).with_context(|| format!("reading {}", path.display()))?;
            let report = run::stage_eval(&read_dataset(&a.dataset)?, &results, &cfg.eval)?;
            write(&out.join(run::REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
            print_report(&report);
        }
        Command::Run => {
            if cli.config.is_none() {
                warn!("no --config given; using default dataset paths {} and {}", cfg.data.train.display(), cfg.data.test.display());
            }
            let summary = run_pipeline(&cfg, out)?;
            for (stage, status) in &summary.stages {
                println!("{stage:12} {status:?}");
            }
            print_report(&summary.report);
        }
        Command::DefaultConfig => print!("{}", hoi_prior::pipeline::DEFAULT_CONFIG_TOML),
    }
    Ok(())
}

fn print_report(report: &run::EvalReport) {
    let row = |name: &str, s: &hoi_prior::evaluation::MetricSummary| {
        let m = &s.median;
        println!(
            "{name:8} n={:<4} human {:8.2} cm  object {:8.2} cm  rotation {:7.2} deg  translation {:8.2} cm",
            s.count, m.smpl_chamfer_cm, m.object_chamfer_cm, m.rotation_error_deg, m.translation_error_cm
        );
    };
    println!("medians ({:?})", report.config.mode);
    if let Some(init) = &report.init {
        row("init", init);
    }
    row("refined", &report.refined);
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Diverged>().is_some() {
        return 3;
    }
    let mut e = match err.downcast_ref::<Error>() {
        Some(e) => e,
        None => return 2,
    };
    while let Error::Stage { source, .. } = e {
        e = source;
    }
    match e {
        Error::NonFinite(_) | Error::NoConvergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
