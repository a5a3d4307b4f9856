//! The `latentview` command line: one subcommand per stage, plus `pipeline`
//! which chains them with file handoffs and writes a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{self, CorpusSplit, ViewMatrix};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::eval::{self, EvalInput, QueryPool};
use crate::factorizer::{self, LatentModel, TrainConfig};
use crate::manifest::{RunManifest, StageRecord};
use crate::pseudoclass::{self, KMeansConfig, Metric, SWEEP_KS};
use crate::sampler::{self, SamplerConfig, Weighting};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "latentview",
    version,
    about = "Item latent factors and pseudo-class labels from implicit view logs"
)]
pub struct Cli {
    /// Append a record of this command (flags, seeds, file digests) to a manifest file
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic corpus (views, owners, truth)
    Synth(SynthCmd),
    /// Read a view log into a matrix file
    Ingest(IngestCmd),
    /// Drop items and users outside the activity bounds, to a fixpoint
    Filter(FilterCmd),
    /// Add popularity-weighted negative samples
    Sample(SampleCmd),
    /// Split items into tr/te and tr entries into train/val
    Split(SplitCmd),
    /// Learn latent factors by SGD
    Factorize(FactorizeCmd),
    /// Cluster item factors into pseudo classes
    Cluster(ClusterCmd),
    /// Compute RMSE, ranking, and retrieval metrics
    Evaluate(EvaluateCmd),
    /// Run every stage end to end
    Pipeline(PipelineCmd),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SeedArg {
    /// Random seed; falls back to the LV_SEED environment variable
    #[arg(long, env = "LV_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthParams {
    /// Number of items
    #[arg(long, default_value_t = 2000)]
    pub items: usize,
    /// Number of users
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    /// Dimension of the planted factors
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    /// Number of planted mixture components
    #[arg(long, default_value_t = 10)]
    pub components: usize,
    /// Tail exponent of the item popularity bias
    #[arg(long, default_value_t = 1.5)]
    pub alpha: f64,
    /// Standard deviation of per-cell score noise
    #[arg(long, default_value_t = 0.1)]
    pub noise_sd: f64,
    /// Target fraction of viewed cells, in (0, 0.05]
    #[arg(long, default_value_t = 0.01)]
    pub density: f64,
    /// Within-component spread of planted factors
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Scale of the popularity bias
    #[arg(long, default_value_t = 0.02)]
    pub bias_scale: f64,
}

impl SynthParams {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_items: self.items,
            n_users: self.users,
            dim: self.latent_dim,
            components: self.components,
            alpha: self.alpha,
            noise_sd: self.noise_sd,
            target_density: self.density,
            spread: self.spread,
            bias_scale: self.bias_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FilterParams {
    /// Minimum positive count kept for items and users
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    /// Maximum positive count kept for items and users
    #[arg(long, default_value_t = 20000)]
    pub max_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingArg {
    /// ln(1 + popularity)
    Log,
    /// popularity
    Linear,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Log => Weighting::LogPopularity,
            WeightingArg::Linear => Weighting::Popularity,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleParams {
    /// Negatives drawn per positive, per user
    #[arg(long, default_value_t = 2.0)]
    pub neg_ratio: f64,
    /// Popularity transform used as the sampling weight
    #[arg(long, value_enum, default_value_t = WeightingArg::Log)]
    pub weighting: WeightingArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitParams {
    /// Fraction of items held out as te
    #[arg(long, default_value_t = 0.05)]
    pub te_fraction: f64,
    /// Fraction of tr entries used for validation
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainParams {
    /// Regularization weight
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Latent dimension
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch
    #[arg(long, default_value_t = 0.95)]
    pub lr_decay: f64,
    /// Passes over the training entries
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Concurrent SGD workers (1 is bitwise deterministic)
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Initialization scale; entries have standard deviation init_scale/sqrt(dim)
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
}

impl TrainParams {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            dim: self.dim,
            lr0: self.lr,
            lr_decay: self.lr_decay,
            epochs: self.epochs,
            workers: self.workers,
            seed,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KMeansParams {
    /// Cluster count(s), comma-separated [default: 2000; the planted component count with --synth-defaults]
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Cluster for every K in 200,500,1000,2000,3000,5000
    #[arg(long, conflicts_with = "k")]
    pub sweep: bool,
    /// Seed for k-means++ seeding [default: the --seed value]
    #[arg(long)]
    pub kmeans_seed: Option<u64>,
    /// Maximum Lloyd iterations
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Stop when no centroid moves farther than this
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Distance used for clustering
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
}

impl KMeansParams {
    fn ks(&self, default_k: usize) -> Vec<usize> {
        if self.sweep {
            SWEEP_KS.to_vec()
        } else if self.k.is_empty() {
            vec![default_k]
        } else {
            self.k.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolArg {
    /// tr items query the other tr items
    Tr,
    /// te items query tr items (needs an embedding covering te)
    Te,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalParams {
    /// Neighbors retrieved per query
    #[arg(long, default_value_t = 100)]
    pub top_n: usize,
    /// Random item pairs for the baseline
    #[arg(long, default_value_t = 100000)]
    pub baseline_pairs: usize,
    /// Which items act as queries
    #[arg(long, value_enum, default_value_t = PoolArg::Tr)]
    pub query_pool: PoolArg,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthCmd {
    /// Directory for views.tsv, owners.tsv, and truth.tsv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: SynthParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestCmd {
    /// View log, `item_id<TAB>user_id` per line
    #[arg(long)]
    pub views: PathBuf,
    /// Owner table, `item_id<TAB>owner_user_id` per line
    #[arg(long)]
    pub owners: Option<PathBuf>,
    /// Matrix file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterCmd {
    /// Matrix file to read
    #[arg(long)]
    pub matrix: PathBuf,
    /// Matrix file to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: FilterParams,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleCmd {
    /// Matrix file to read
    #[arg(long)]
    pub matrix: PathBuf,
    /// Matrix file to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: SampleParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitCmd {
    /// Matrix file (with sampled negatives) to read
    #[arg(long)]
    pub matrix: PathBuf,
    /// Directory for items.tsv and entries.tsv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: SplitParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Serialize)]
pub struct FactorizeCmd {
    /// Matrix file to read
    #[arg(long)]
    pub matrix: PathBuf,
    /// Directory written by `split`
    #[arg(long)]
    pub split_dir: PathBuf,
    /// Directory for item_factors.tsv, user_factors.tsv, and train_log.tsv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: TrainParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterCmd {
    /// Item factors file
    #[arg(long)]
    pub factors: PathBuf,
    /// Directory for labels_k<K>.tsv files
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: KMeansParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateCmd {
    /// Matrix file to read
    #[arg(long)]
    pub matrix: PathBuf,
    /// Directory written by `split`
    #[arg(long)]
    pub split_dir: PathBuf,
    /// Directory written by `factorize`; enables RMSE and PR
    #[arg(long)]
    pub factors_dir: Option<PathBuf>,
    /// Item embedding in factors format [default: item_factors.tsv in --factors-dir]
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// Owner table for the owner-view measurement
    #[arg(long)]
    pub owners: Option<PathBuf>,
    /// Directory for report.json and jaccard_curve.tsv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: EvalParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineCmd {
    /// Directory receiving every stage's outputs and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Generate a planted synthetic corpus instead of reading --views
    #[arg(long, conflicts_with = "views", required_unless_present = "views")]
    pub synth_defaults: bool,
    /// View log, `item_id<TAB>user_id` per line
    #[arg(long)]
    pub views: Option<PathBuf>,
    /// Owner table, `item_id<TAB>owner_user_id` per line
    #[arg(long, requires = "views")]
    pub owners: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub synth: SynthParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub filter: FilterParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub sample: SampleParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub kmeans: KMeansParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

/// Cluster count used when none is given.
pub const DEFAULT_K: usize = 2000;

fn record(
    command: &str,
    seed: Option<u64>,
    args: &impl Serialize,
    base: Option<&Path>,
) -> Result<StageRecord> {
    Ok(StageRecord::new(
        command,
        seed,
        serde_json::to_value(args)?,
        base,
    ))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn synth(cmd: &SynthCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("synth", Some(cmd.seed.seed), cmd, base)?;
    let corpus = synth::generate_planted(&cmd.params.config(cmd.seed.seed))?;
    corpus.write(&cmd.out_dir)?;
    eprintln!(
        "synth: {} items, {} users, {} views (density {:.5}, top-decile share {:.3})",
        corpus.matrix.n_items(),
        corpus.matrix.n_users(),
        corpus.matrix.nnz(),
        corpus.matrix.density(),
        corpus.top_decile_share()
    );
    rec.output_dir(&cmd.out_dir, base)?;
    Ok(rec)
}

pub fn ingest(cmd: &IngestCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("ingest", None, cmd, base)?;
    let m = corpus::ingest_views(&cmd.views, cmd.owners.as_deref())?;
    create_parent(&cmd.out)?;
    m.export_tsv(&cmd.out)?;
    eprintln!(
        "ingest: {} items, {} users, {} positives (density {:.5})",
        m.n_items(),
        m.n_users(),
        m.nnz(),
        m.density()
    );
    rec.input(&cmd.views, base)?;
    if let Some(o) = &cmd.owners {
        rec.input(o, base)?;
    }
    rec.output(&cmd.out, base)?;
    Ok(rec)
}

pub fn filter(cmd: &FilterCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("filter", None, cmd, base)?;
    let m = ViewMatrix::read_tsv(&cmd.matrix, None)?;
    let f = corpus::apply_activity_filter(&m, cmd.params.min_count, cmd.params.max_count)?;
    create_parent(&cmd.out)?;
    f.export_tsv(&cmd.out)?;
    eprintln!(
        "filter: {}x{} -> {}x{} ({} entries, density {:.5})",
        m.n_items(),
        m.n_users(),
        f.n_items(),
        f.n_users(),
        f.nnz(),
        f.density()
    );
    rec.input(&cmd.matrix, base)?;
    rec.output(&cmd.out, base)?;
    Ok(rec)
}

pub fn sample(cmd: &SampleCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("sample", Some(cmd.seed.seed), cmd, base)?;
    let m = ViewMatrix::read_tsv(&cmd.matrix, None)?;
    let pop = corpus::popularity(&m);
    let dist = sampler::build_sampling_distribution(&m, &pop, cmd.params.weighting.into());
    let cfg = SamplerConfig {
        neg_ratio: cmd.params.neg_ratio,
        seed: cmd.seed.seed,
    };
    let s = sampler::sample_negatives(&m, &dist, &cfg)?;
    create_parent(&cmd.out)?;
    s.export_tsv(&cmd.out)?;
    eprintln!(
        "sample: {} positives + {} negatives (density {:.5} -> {:.5})",
        s.n_positive(),
        s.nnz() - s.n_positive(),
        m.density(),
        s.density()
    );
    rec.input(&cmd.matrix, base)?;
    rec.output(&cmd.out, base)?;
    Ok(rec)
}

pub fn split(cmd: &SplitCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("split", Some(cmd.seed.seed), cmd, base)?;
    let m = ViewMatrix::read_tsv(&cmd.matrix, None)?;
    let items = corpus::split_items(&m, cmd.params.te_fraction, cmd.seed.seed)?;
    let s = corpus::split_entries(&m, items, cmd.params.val_fraction, cmd.seed.seed)?;
    s.write(&m, &cmd.out_dir)?;
    eprintln!(
        "split: {} tr / {} te items, {} train / {} val entries",
        s.items.tr_items.len(),
        s.items.te_items.len(),
        s.train.len(),
        s.val.len()
    );
    rec.input(&cmd.matrix, base)?;
    rec.output_dir(&cmd.out_dir, base)?;
    Ok(rec)
}

pub const ITEM_FACTORS: &str = "item_factors.tsv";
pub const USER_FACTORS: &str = "user_factors.tsv";
pub const TRAIN_LOG: &str = "train_log.tsv";

pub fn factorize(cmd: &FactorizeCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("factorize", Some(cmd.seed.seed), cmd, base)?;
    let m = ViewMatrix::read_tsv(&cmd.matrix, None)?;
    let split = CorpusSplit::read(&m, &cmd.split_dir)?;
    let cfg = cmd.params.config(cmd.seed.seed);
    let (model, log) = factorizer::train(&m, &split, &cfg)?;
    create_dir(&cmd.out_dir)?;
    model
        .item_embedding(&m, &split.items.tr_items)
        .write_tsv(&cmd.out_dir.join(ITEM_FACTORS))?;
    model
        .user_embedding(&m)
        .write_tsv(&cmd.out_dir.join(USER_FACTORS))?;
    log.write_tsv(&cmd.out_dir.join(TRAIN_LOG))?;
    eprintln!(
        "factorize: objective {:.4} -> {:.4}, val RMSE {:.4} -> {:.4}",
        log.initial().train_objective,
        log.last().train_objective,
        log.initial().val_rmse,
        log.last().val_rmse
    );
    rec.input(&cmd.matrix, base)?;
    rec.input_dir(&cmd.split_dir, base)?;
    rec.output_dir(&cmd.out_dir, base)?;
    Ok(rec)
}

pub fn labels_file(k: usize) -> String {
    format!("labels_k{k}.tsv")
}

pub fn cluster(cmd: &ClusterCmd, default_k: usize, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record(
        "cluster",
        Some(cmd.params.kmeans_seed.unwrap_or(cmd.seed.seed)),
        cmd,
        base,
    )?;
    let factors = Embedding::read_tsv(&cmd.factors)?;
    create_dir(&cmd.out_dir)?;
    rec.input(&cmd.factors, base)?;
    for k in cmd.params.ks(default_k) {
        let cfg = KMeansConfig {
            k,
            seed: cmd.params.kmeans_seed.unwrap_or(cmd.seed.seed),
            max_iters: cmd.params.max_iters,
            tol: cmd.params.tol,
            metric: cmd.params.metric.into(),
        };
        let fit = pseudoclass::kmeans_fit(&factors, &cfg)?;
        let table = pseudoclass::assign_pseudo_classes(&fit, factors.ids())?;
        let path = cmd.out_dir.join(labels_file(k));
        pseudoclass::export_labels(&table, &path)?;
        eprintln!(
            "cluster: k={k}, {} items, inertia {:.4} after {} iterations",
            factors.len(),
            fit.inertia,
            fit.iterations
        );
        rec.output(&path, base)?;
    }
    Ok(rec)
}

pub const REPORT: &str = "report.json";
pub const CURVE: &str = "jaccard_curve.tsv";

pub fn evaluate(cmd: &EvaluateCmd, base: Option<&Path>) -> Result<StageRecord> {
    let mut rec = record("evaluate", Some(cmd.seed.seed), cmd, base)?;
    let mut m = ViewMatrix::read_tsv(&cmd.matrix, None)?;
    let skipped_owners = match &cmd.owners {
        Some(o) => m.attach_owners_lenient(o)?,
        None => 0,
    };
    let split = CorpusSplit::read(&m, &cmd.split_dir)?;
    let emb_path = match (&cmd.embedding, &cmd.factors_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(ITEM_FACTORS),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "evaluate needs --factors-dir or --embedding".into(),
            ))
        }
    };
    let embedding = Embedding::read_tsv(&emb_path)?;

    let mut config: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in &rec.flags {
        config.insert(k.clone(), v.to_string());
    }
    config.insert("owners_unmatched".into(), skipped_owners.to_string());
    let model = match &cmd.factors_dir {
        Some(dir) => {
            let items = Embedding::read_tsv(&dir.join(ITEM_FACTORS))?;
            let users = Embedding::read_tsv(&dir.join(USER_FACTORS))?;
            let log = dir.join(TRAIN_LOG);
            if let Ok(text) = std::fs::read_to_string(&log) {
                if let Some(header) = text.lines().next() {
                    config.insert("train".into(), header.trim_start_matches("# ").to_owned());
                }
            }
            Some(LatentModel::from_embeddings(&m, &items, &users)?)
        }
        None => None,
    };

    let report = eval::evaluate(EvalInput {
        matrix: &m,
        model: model.as_ref().map(|md| (md, split.val.as_slice())),
        embedding: &embedding,
        tr_items: &split.items.tr_items,
        te_items: &split.items.te_items,
        pool: match cmd.params.query_pool {
            PoolArg::Tr => QueryPool::Tr,
            PoolArg::Te => QueryPool::Te,
        },
        top_n: cmd.params.top_n,
        baseline_pairs: cmd.params.baseline_pairs,
        seed: cmd.seed.seed,
        config,
    })?;
    create_dir(&cmd.out_dir)?;
    let report_path = cmd.out_dir.join(REPORT);
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    let curve = eval::JaccardCurve {
        mean_by_rank: report.jaccard_curve.clone(),
        empty_viewer_queries: report.empty_viewer_queries,
    };
    curve.write_tsv(&cmd.out_dir.join(CURVE))?;
    eprintln!(
        "evaluate: rmse {:?}, pr {:?}, jaccard@1 {:.4} (random {:.4}), owner views {:.3} (random {:.3})",
        report.rmse,
        report.pr,
        report.jaccard_curve.first().copied().unwrap_or(0.0),
        report.random_baselines.mean_jaccard,
        report.owner_view_mean,
        report.random_baselines.owner_view_count
    );

    rec.input(&cmd.matrix, base)?;
    rec.input_dir(&cmd.split_dir, base)?;
    rec.input(&emb_path, base)?;
    if let Some(o) = &cmd.owners {
        rec.input(o, base)?;
    }
    rec.output_dir(&cmd.out_dir, base)?;
    Ok(rec)
}

/// Runs every stage under `cmd.out_dir` and writes `manifest.json` there.
pub fn pipeline(cmd: &PipelineCmd) -> Result<RunManifest> {
    let out = cmd.out_dir.as_path();
    create_dir(out)?;
    let base = Some(out);
    let seed = cmd.seed.clone();
    let mut manifest = RunManifest::new();

    let (views, owners, truth, default_k) = if cmd.synth_defaults {
        let dir = out.join("synth");
        let stage = SynthCmd {
            out_dir: dir.clone(),
            params: cmd.synth.clone(),
            seed: seed.clone(),
        };
        manifest.stages.push(synth(&stage, base)?);
        (
            dir.join("views.tsv"),
            Some(dir.join("owners.tsv")),
            Some(dir.join("truth.tsv")),
            cmd.synth.components,
        )
    } else {
        let views = cmd.views.clone().ok_or_else(|| {
            Error::InvalidArgument("pipeline needs --views or --synth-defaults".into())
        })?;
        (views, cmd.owners.clone(), None, DEFAULT_K)
    };

    let matrix = out.join("matrix.tsv");
    manifest.stages.push(ingest(
        &IngestCmd {
            views,
            owners: owners.clone(),
            out: matrix.clone(),
        },
        base,
    )?);

    let filtered = out.join("filtered.tsv");
    manifest.stages.push(filter(
        &FilterCmd {
            matrix,
            out: filtered.clone(),
            params: cmd.filter.clone(),
        },
        base,
    )?);

    let sampled = out.join("sampled.tsv");
    manifest.stages.push(sample(
        &SampleCmd {
            matrix: filtered,
            out: sampled.clone(),
            params: cmd.sample.clone(),
            seed: seed.clone(),
        },
        base,
    )?);

    let split_dir = out.join("split");
    manifest.stages.push(split(
        &SplitCmd {
            matrix: sampled.clone(),
            out_dir: split_dir.clone(),
            params: cmd.split.clone(),
            seed: seed.clone(),
        },
        base,
    )?);

    let factors_dir = out.join("factors");
    manifest.stages.push(factorize(
        &FactorizeCmd {
            matrix: sampled.clone(),
            split_dir: split_dir.clone(),
            out_dir: factors_dir.clone(),
            params: cmd.train.clone(),
            seed: seed.clone(),
        },
        base,
    )?);

    let labels_dir = out.join("labels");
    manifest.stages.push(cluster(
        &ClusterCmd {
            factors: factors_dir.join(ITEM_FACTORS),
            out_dir: labels_dir.clone(),
            params: cmd.kmeans.clone(),
            seed: seed.clone(),
        },
        default_k,
        base,
    )?);

    let eval_dir = out.join("eval");
    manifest.stages.push(evaluate(
        &EvaluateCmd {
            matrix: sampled,
            split_dir,
            factors_dir: Some(factors_dir),
            embedding: None,
            owners,
            out_dir: eval_dir.clone(),
            params: cmd.eval.clone(),
            seed,
        },
        base,
    )?);

    if let Some(truth) = truth {
        let mut rec = StageRecord::new("oracle", None, serde_json::json!({}), base);
        let truth_map = synth::read_truth(&truth)?;
        let mut scores = BTreeMap::new();
        for k in cmd.kmeans.ks(default_k) {
            let path = labels_dir.join(labels_file(k));
            let table = pseudoclass::LabelTable::read_tsv(&path)?;
            let (planted, learned): (Vec<usize>, Vec<usize>) = table
                .0
                .iter()
                .filter_map(|(id, c)| Some((*truth_map.get(id)?, *c)))
                .unzip();
            scores.insert(
                format!("ari_k{k}"),
                synth::adjusted_rand_index(&planted, &learned)?,
            );
            rec.input(&path, base)?;
        }
        let path = eval_dir.join("oracle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&scores)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        eprintln!("oracle: {scores:?}");
        rec.input(&truth, base)?;
        rec.output(&path, base)?;
        manifest.stages.push(rec);
    }

    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Runs an already-parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Command::Pipeline(cmd) = &cli.command {
        pipeline(cmd)?;
        return Ok(());
    }
    let base = cli
        .manifest
        .as_deref()
        .and_then(Path::parent)
        .filter(|p| !p.as_os_str().is_empty());
    let rec = match &cli.command {
        Command::Synth(c) => synth(c, base)?,
        Command::Ingest(c) => ingest(c, base)?,
        Command::Filter(c) => filter(c, base)?,
        Command::Sample(c) => sample(c, base)?,
        Command::Split(c) => split(c, base)?,
        Command::Factorize(c) => factorize(c, base)?,
        Command::Cluster(c) => cluster(c, DEFAULT_K, base)?,
        Command::Evaluate(c) => evaluate(c, base)?,
        Command::Pipeline(_) => unreachable!("handled above"),
    };
    if let Some(path) = &cli.manifest {
        let mut manifest = RunManifest::load_or_new(path)?;
        manifest.stages.push(rec);
        manifest.write(path)?;
    }
    Ok(())
}
