//! Command-line front end. Every subcommand is a thin wrapper over the
//! library; failures are reported on stderr as one JSON line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderConfig, KernelConfig, KernelLevel, DEFAULT_BANDWIDTHS};
use crate::compactor::{attach_motion, compact, corpus_stats, register_and_compact, CompactionStats, EncoderInput, MatchParams};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::graph::{
    graphs_from_records, load_graphs, read_detection_records, save_graphs, write_detections, ClassKind, ClassRegistry,
    LoadOptions, SceneGraph25D,
};
use crate::numcore::AdamConfig;
use crate::qa::{evaluate_parallel, load_qa, save_qa, train, Dataset, EpochMetrics, EvalMetrics, ModelConfig, QaModel, TrainConfig};
use crate::synth::{builtin_registry, generate_corpus, CorpusSpec, GroundTruth, QaDerivation, VOCAB_SIZE};

pub const STATS_FORMAT: &str = "prism25d-stats";
pub const TRAIN_METRICS_FORMAT: &str = "prism25d-train-metrics";
pub const EVAL_FORMAT: &str = "prism25d-eval";
pub const TRUTH_FORMAT: &str = "prism25d-truth";
pub const REPORT_VERSION: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "prism25d", version, about = "Spatio-temporal scene graphs and kernel-attention video QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lift a detection file into a graph file.
    Ingest(IngestArgs),
    /// Register frames and merge re-observed static objects.
    Compact(CompactArgs),
    /// Compare node counts of a graph file before and after compaction.
    Stats(StatsArgs),
    /// Generate synthetic worlds, detections, ground truth and questions.
    Synth(SynthArgs),
    /// Train the QA model on detections and questions.
    Train(TrainArgs),
    /// Score a checkpoint on detections and questions.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    /// Class registry JSON (default: the built-in synthetic registry).
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Timestamp normalizer (default: largest frame index in the file plus one).
    #[arg(long)]
    pub max_frames: Option<u32>,
    /// Image width in pixels; intrinsics default to fx = fy = max(w, h) and a centered principal point.
    #[arg(long, default_value_t = 640.0)]
    pub width: f64,
    /// Image height in pixels.
    #[arg(long, default_value_t = 480.0)]
    pub height: f64,
    /// Focal length along x in pixels, overriding the image-size default.
    #[arg(long)]
    pub fx: Option<f64>,
    /// Focal length along y in pixels.
    #[arg(long)]
    pub fy: Option<f64>,
    /// Principal point x in pixels.
    #[arg(long)]
    pub cx: Option<f64>,
    /// Principal point y in pixels.
    #[arg(long)]
    pub cy: Option<f64>,
}

impl LiftArgs {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let base = Intrinsics::for_image(self.width, self.height);
        let intr = Intrinsics {
            fx: self.fx.unwrap_or(base.fx),
            fy: self.fy.unwrap_or(base.fy),
            cx: self.cx.unwrap_or(base.cx),
            cy: self.cy.unwrap_or(base.cy),
        };
        if !(intr.fx > 0.0 && intr.fy > 0.0) || ![intr.cx, intr.cy].iter().all(|c| c.is_finite()) {
            return Err(Error::Validation(format!("invalid intrinsics {intr:?}")));
        }
        Ok(intr)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Detection JSONL file.
    #[arg(long)]
    pub detections: PathBuf,
    /// Output graph file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub lift: LiftArgs,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// IoU threshold of the merge criterion (default 0.5).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Look-back window in frames (default 3).
    #[arg(long)]
    pub delta: Option<u32>,
}

impl MatchArgs {
    fn params(&self, base: MatchParams) -> Result<MatchParams> {
        MatchParams::new(self.gamma.unwrap_or(base.gamma), self.delta.unwrap_or(base.delta))
    }
}

#[derive(Debug, Args)]
pub struct CompactArgs {
    /// Input graph file.
    #[arg(long)]
    pub graphs: PathBuf,
    /// Output graph file.
    #[arg(long)]
    pub out: PathBuf,
    /// Registry the graph file was built with (default: built-in).
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[command(flatten)]
    pub matching: MatchArgs,
    /// Skip frame registration and compare raw camera-frame centroids.
    #[arg(long)]
    pub no_register: bool,
    /// Also write node-count statistics to this file.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Worker threads across videos; output order does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Graph file before compaction.
    #[arg(long)]
    pub before: PathBuf,
    /// Graph file after compaction.
    #[arg(long)]
    pub after: PathBuf,
    /// Also write the statistics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus spec JSON: a world template, world count, task and questions per world.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output detection JSONL.
    #[arg(long)]
    pub out_detections: PathBuf,
    /// Output question JSONL.
    #[arg(long)]
    pub out_qa: PathBuf,
    /// Output ground-truth JSON.
    #[arg(long)]
    pub out_truth: PathBuf,
    /// Also write the class registry the detections use.
    #[arg(long)]
    pub out_registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub matching: MatchArgs,
    /// Comma-separated spatial bandwidths, sigma_T = sigma_S (default 0.01,0.1,1,10).
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Attention heads (default 4).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Latent width r (default 32).
    #[arg(long)]
    pub latent: Option<usize>,
    /// Depth of the feature-similarity attention stack (default 1).
    #[arg(long)]
    pub standard_layers: Option<usize>,
    /// Drop the feature-similarity branch and use the kernel hierarchy alone.
    #[arg(long)]
    pub no_combine: bool,
    /// Adam learning rate (default 1e-3); 0 leaves parameters untouched.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size (default 16).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training epochs (default 20).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization and shuffling (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training detection JSONL.
    #[arg(long)]
    pub detections: PathBuf,
    /// Training question JSONL.
    #[arg(long)]
    pub qa: PathBuf,
    /// Held-out detection JSONL.
    #[arg(long, requires = "val_qa")]
    pub val_detections: Option<PathBuf>,
    /// Held-out question JSONL.
    #[arg(long, requires = "val_detections")]
    pub val_qa: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics JSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Write the freshly initialized checkpoint here before training.
    #[arg(long)]
    pub save_init: Option<PathBuf>,
    #[command(flatten)]
    pub lift: LiftArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Detection JSONL.
    #[arg(long)]
    pub detections: PathBuf,
    /// Question JSONL.
    #[arg(long)]
    pub qa: PathBuf,
    /// Metrics JSON output (also printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub lift: LiftArgs,
    #[command(flatten)]
    pub matching: MatchArgs,
    /// Worker threads across questions; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Hyperparameters of a training run; every field may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: f64,
    pub delta: u32,
    pub sigmas: Vec<f64>,
    /// Temporal bandwidths; tied to `sigmas` when absent.
    pub sigma_t: Option<Vec<f64>>,
    pub heads: usize,
    pub latent_dim: usize,
    pub standard_layers: usize,
    pub combine: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gamma: 0.5,
            delta: 3,
            sigmas: DEFAULT_BANDWIDTHS.to_vec(),
            sigma_t: None,
            heads: 4,
            latent_dim: 32,
            standard_layers: 1,
            combine: true,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }

    fn apply(mut self, a: &ModelArgs) -> Self {
        self.gamma = a.matching.gamma.unwrap_or(self.gamma);
        self.delta = a.matching.delta.unwrap_or(self.delta);
        if let Some(s) = &a.sigmas {
            self.sigmas = s.clone();
        }
        self.heads = a.heads.unwrap_or(self.heads);
        self.latent_dim = a.latent.unwrap_or(self.latent_dim);
        self.standard_layers = a.standard_layers.unwrap_or(self.standard_layers);
        self.lr = a.lr.unwrap_or(self.lr);
        self.batch_size = a.batch.unwrap_or(self.batch_size);
        self.epochs = a.epochs.unwrap_or(self.epochs);
        self.seed = a.seed.unwrap_or(self.seed);
        if a.no_combine {
            self.combine = false;
        }
        self
    }

    pub fn match_params(&self) -> Result<MatchParams> {
        MatchParams::new(self.gamma, self.delta)
    }

    pub fn kernel(&self) -> Result<KernelConfig> {
        let levels = match &self.sigma_t {
            None => self.sigmas.iter().map(|s| KernelLevel::tied(*s)).collect(),
            Some(t) if t.len() == self.sigmas.len() => self
                .sigmas
                .iter()
                .zip(t)
                .map(|(s, t)| KernelLevel { sigma_s: *s, sigma_t: *t })
                .collect(),
            Some(_) => return Err(Error::Validation("sigma_t must have one entry per sigma".into())),
        };
        let k = KernelConfig {
            levels,
            heads: self.heads,
            latent_dim: self.latent_dim,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

impl ModelArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = base.apply(self);
        cfg.match_params()?;
        cfg.kernel()?;
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::Validation("batch and epochs must be positive".into()));
        }
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Validation("lr must be finite and nonnegative".into()));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub format: &'static str,
    pub version: u64,
    pub videos: usize,
    #[serde(flatten)]
    pub stats: CompactionStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub format: &'static str,
    pub version: u64,
    pub config: RunConfig,
    pub epochs: Vec<EpochMetrics>,
    pub train: EvalMetrics,
    pub val: Option<EvalMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub format: &'static str,
    pub version: u64,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

#[derive(Serialize)]
struct TruthFile<'a> {
    format: &'static str,
    version: u64,
    worlds: Vec<&'a GroundTruth>,
    derivations: &'a [QaDerivation],
}

fn registry_from(path: &Option<PathBuf>) -> Result<ClassRegistry> {
    match path {
        Some(p) => ClassRegistry::load(p),
        None => Ok(builtin_registry()),
    }
}

/// Reads detections and lifts them into one graph per video.
pub fn lift_file(path: &Path, lift: &LiftArgs) -> Result<(ClassRegistry, Vec<SceneGraph25D>)> {
    let registry = registry_from(&lift.registry)?;
    let records = read_detection_records(path)?;
    let max_frames = match lift.max_frames {
        Some(m) => m,
        None => records.iter().map(|(_, r)| r.frame_index + 1).max().unwrap_or(1),
    };
    let opts = LoadOptions {
        max_frames,
        intrinsics: lift.intrinsics()?,
    };
    let graphs = graphs_from_records(records, &registry, &opts)?;
    Ok((registry, graphs))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Registers (optionally) and compacts every graph, keeping input order.
pub fn compact_all(graphs: &[SceneGraph25D], params: &MatchParams, register: bool, jobs: usize) -> Result<Vec<SceneGraph25D>> {
    pool(jobs)?.install(|| {
        graphs
            .par_iter()
            .map(|g| if register { register_and_compact(g, params) } else { compact(g, params) })
            .collect()
    })
}

/// Lift → register → compact → attach motion.
pub fn encoder_inputs(graphs: &[SceneGraph25D], params: &MatchParams) -> Result<Vec<EncoderInput>> {
    compact_all(graphs, params, true, 1)?.iter().map(attach_motion).collect()
}

/// Appearance and motion widths shared by all nodes of the inputs.
pub fn feature_dims(inputs: &[EncoderInput]) -> Result<(usize, usize)> {
    let (mut object, mut full_dynamic) = (None, None);
    for node in inputs.iter().flat_map(|i| &i.nodes) {
        let slot = match node.kind {
            ClassKind::Static => &mut object,
            ClassKind::Dynamic => &mut full_dynamic,
        };
        match *slot {
            None => *slot = Some(node.feature.len()),
            Some(n) if n != node.feature.len() => {
                return Err(Error::Validation(format!(
                    "node {} of {} has feature width {} instead of {n}",
                    node.node_id,
                    inputs.iter().find(|i| i.nodes.contains(node)).map_or("?", |i| &i.video_id),
                    node.feature.len()
                )))
            }
            Some(_) => {}
        }
    }
    let object = object.ok_or_else(|| Error::Validation("no static nodes to size the encoder".into()))?;
    let motion = match full_dynamic {
        Some(n) if n < object => return Err(Error::Validation("dynamic features narrower than static ones".into())),
        Some(n) => n - object,
        None => 0,
    };
    Ok((object, motion))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let (registry, graphs) = lift_file(&a.detections, &a.lift)?;
    save_graphs(&graphs, &registry, &a.out)?;
    println!("{}", serde_json::json!({"videos": graphs.len(), "nodes": graphs.iter().map(SceneGraph25D::len).sum::<usize>()}));
    Ok(())
}

fn stats_report(before: &[SceneGraph25D], after: &[SceneGraph25D]) -> Result<StatsReport> {
    if before.len() != after.len() || before.iter().zip(after).any(|(b, a)| b.video_id != a.video_id) {
        return Err(Error::Validation("before and after files hold different videos".into()));
    }
    Ok(StatsReport {
        format: STATS_FORMAT,
        version: REPORT_VERSION,
        videos: before.len(),
        stats: corpus_stats(before.iter().zip(after)),
    })
}

fn print_stats(r: &StatsReport) {
    println!("videos  full  static  dynamic  reduction");
    println!(
        "{}  {:.2}  {:.2}  {:.2}  {:.1}%",
        r.videos, r.stats.full, r.stats.static_nodes, r.stats.dynamic_nodes, r.stats.reduction_pct
    );
}

fn cmd_compact(a: &CompactArgs) -> Result<()> {
    let registry = registry_from(&a.registry)?;
    let corpus = load_graphs(&a.graphs)?;
    if corpus.registry_digest != registry.digest() {
        return Err(Error::Registry("graph file was built with a different registry".into()));
    }
    for g in &corpus.graphs {
        g.validate(&registry)?;
    }
    let params = a.matching.params(MatchParams::default())?;
    let compacted = compact_all(&corpus.graphs, &params, !a.no_register, a.jobs)?;
    save_graphs(&compacted, &registry, &a.out)?;
    let report = stats_report(&corpus.graphs, &compacted)?;
    if let Some(p) = &a.stats {
        write_json(&report, p)?;
    }
    print_stats(&report);
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let before = load_graphs(&a.before)?;
    let after = load_graphs(&a.after)?;
    if before.registry_digest != after.registry_digest {
        return Err(Error::Registry("files were built with different registries".into()));
    }
    let report = stats_report(&before.graphs, &after.graphs)?;
    if let Some(p) = &a.out {
        write_json(&report, p)?;
    }
    print_stats(&report);
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec: CorpusSpec = serde_json::from_reader(std::io::BufReader::new(File::open(&a.spec)?))?;
    let corpus = generate_corpus(&spec)?;
    write_detections(corpus.detections(), &a.out_detections)?;
    save_qa(&corpus.qa, &a.out_qa)?;
    write_json(
        &TruthFile {
            format: TRUTH_FORMAT,
            version: REPORT_VERSION,
            worlds: corpus.truths(),
            derivations: &corpus.derivations,
        },
        &a.out_truth,
    )?;
    if let Some(p) = &a.out_registry {
        builtin_registry().save(p)?;
    }
    println!(
        "{}",
        serde_json::json!({"worlds": corpus.worlds.len(), "detections": corpus.detections().count(), "questions": corpus.qa.len()})
    );
    Ok(())
}

fn load_dataset(det: &Path, qa: &Path, lift: &LiftArgs, params: &MatchParams, model: &ModelConfig) -> Result<Dataset> {
    let (_, graphs) = lift_file(det, lift)?;
    let inputs = encoder_inputs(&graphs, params)?;
    Dataset::new(inputs, load_qa(qa)?, model)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let params = cfg.match_params()?;
    let (_, graphs) = lift_file(&a.detections, &a.lift)?;
    let inputs = encoder_inputs(&graphs, &params)?;
    let (object_dim, motion_dim) = feature_dims(&inputs)?;
    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            object_dim,
            motion_dim,
            kernel: cfg.kernel()?,
            standard_layers: cfg.standard_layers,
            combine: cfg.combine,
        },
        vocab_size: VOCAB_SIZE,
        seed: cfg.seed,
    };
    let train_set = Dataset::new(inputs, load_qa(&a.qa)?, &model_cfg)?;
    let val_set = match (&a.val_detections, &a.val_qa) {
        (Some(d), Some(q)) => Some(load_dataset(d, q, &a.lift, &params, &model_cfg)?),
        _ => None,
    };
    let mut model = QaModel::new(model_cfg)?;
    if let Some(p) = &a.save_init {
        model.save(p)?;
    }
    let epochs = train(&mut model, &train_set, val_set.as_ref(), &cfg.train_config())?;
    model.save(&a.out)?;
    let report = TrainReport {
        format: TRAIN_METRICS_FORMAT,
        version: REPORT_VERSION,
        config: cfg,
        train: evaluate_parallel(&model, &train_set, 1)?,
        val: val_set.as_ref().map(|v| evaluate_parallel(&model, v, 1)).transpose()?,
        epochs,
    };
    if let Some(p) = &a.metrics {
        write_json(&report, p)?;
    }
    println!("{}", serde_json::to_string(&serde_json::json!({"train": report.train, "val": report.val}))?);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = QaModel::load(&a.checkpoint)?;
    let params = a.matching.params(MatchParams::default())?;
    let data = load_dataset(&a.detections, &a.qa, &a.lift, &params, &model.config)?;
    let report = EvalReport {
        format: EVAL_FORMAT,
        version: REPORT_VERSION,
        metrics: evaluate_parallel(&model, &data, a.jobs)?,
    };
    if let Some(p) = &a.out {
        write_json(&report, p)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Compact(a) => cmd_compact(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report_error("usage", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            e.exit_code()
        }
    }
}
