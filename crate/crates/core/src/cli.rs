//! Command-line front end.
//!
//! Exit codes: 0 success, 1 i/o or backend failure, 2 usage or validation
//! error, 3 numerical divergence, 4 incompatible checkpoint.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_dataset, read_labels_csv, save_dataset_with, split_spots, ExpressionFormat, Spot, StDataset};
use crate::error::Error;
use crate::extractors::{
    CommandExtractor, EmbeddingCache, FallbackExtractor, FeatureExtractor, RemoteExtractor, EXTRA_FEATURES,
};
use crate::metrics::{ari, evaluate_with, kmeans_domains, PccAxis};
use crate::model::{load_checkpoint, Checkpoint, ModelConfig, PeMode, CHECKPOINT_VERSION};
use crate::preprocess::{preprocess_dataset, PreprocessConfig};
use crate::superres::{nearest_neighbor_spacing, upsample_spots};
use crate::synthbench::{generate, write_synthetic, SynthConfig};
use crate::trainer::{
    check_checkpoint, predict_cached, train_with, write_loss_trace, LrSchedule, OptimizerKind, PredictConfig,
    TrainConfig, TrainOptions,
};

pub const MANIFEST_JSON: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.hsge";
pub const LOSS_TRACE_CSV: &str = "loss_trace.csv";

#[derive(Parser, Debug)]
#[command(name = "histosge", version, about = "Predict and super-resolve spatial gene expression from histology")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dataset directory and write it in canonical form.
    Ingest(IngestArgs),
    /// Generate a synthetic slice with known ground truth.
    Synth(SynthArgs),
    /// Random train/test split of the spots.
    Split(SplitArgs),
    /// Train a model and write checkpoints and the loss trace.
    Train(TrainArgs),
    /// Predict expression at a dataset's own spots.
    Predict(PredictArgs),
    /// Construct unmeasured spots and predict expression at every spot.
    Upsample(UpsampleArgs),
    /// Compare predicted against observed expression.
    Evaluate(EvaluateArgs),
    /// Score k-means or external clusters against annotations.
    ClusterEval(ClusterEvalArgs),
    /// Render one gene's expression as a spot scatter PNG.
    Plot(PlotArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExpressionFormatArg {
    Csv,
    Binary,
}

impl From<ExpressionFormatArg> for ExpressionFormat {
    fn from(f: ExpressionFormatArg) -> Self {
        match f {
            ExpressionFormatArg::Csv => ExpressionFormat::Csv,
            ExpressionFormatArg::Binary => ExpressionFormat::Binary,
        }
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Source dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expression encoding of the written dataset.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ExpressionFormatArg,
    /// Library-size normalise and log-transform.
    #[arg(long)]
    pub normalize: bool,
    /// Keep only the most variable genes (after normalisation).
    #[arg(long, requires = "normalize")]
    pub n_hvg: Option<usize>,
    #[arg(long, default_value_t = 1e4)]
    pub target_sum: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub rows: u32,
    #[arg(long, default_value_t = 10)]
    pub cols: u32,
    #[arg(long, default_value_t = 60)]
    pub pitch: u32,
    #[arg(long, default_value_t = 50)]
    pub genes: usize,
    #[arg(long, default_value_t = 4)]
    pub textures: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Receives `train/` and `test/` dataset directories.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of spots held out for testing.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExtractorKind {
    /// Deterministic hand-crafted descriptor; needs no weights.
    Fallback,
    /// HTTP embedding service (`--extractor-url`, token from HISTOSGE_EMBED_TOKEN).
    Remote,
    /// Local program reading PNG on stdin (`--extractor-cmd`).
    Local,
}

#[derive(Args, Debug, Clone)]
pub struct ExtractorArgs {
    #[arg(long, value_enum, default_value = "fallback")]
    pub extractor: ExtractorKind,
    #[arg(long)]
    pub extractor_url: Option<String>,
    #[arg(long)]
    pub extractor_cmd: Option<String>,
    /// Persistent embedding cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long)]
    pub deterministic: bool,
}

impl ExtractorArgs {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>, CliError> {
        match self.extractor {
            ExtractorKind::Fallback => Ok(Box::new(FallbackExtractor)),
            ExtractorKind::Remote => {
                let url = self
                    .extractor_url
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--extractor remote requires --extractor-url".into()))?;
                Ok(Box::new(RemoteExtractor::from_env(url.clone())))
            }
            ExtractorKind::Local => {
                let cmd = self
                    .extractor_cmd
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--extractor local requires --extractor-cmd".into()))?;
                Ok(Box::new(CommandExtractor::from_command_line(cmd)?))
            }
        }
    }

    fn open_cache(&self) -> Result<Option<EmbeddingCache>, CliError> {
        Ok(match &self.cache {
            Some(p) => Some(EmbeddingCache::open(p)?),
            None => None,
        })
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with optional `[model]`, `[train]` and `[preprocess]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Args, Debug)]
pub struct UpsampleArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Upsampling factor: 2, 4 or 8.
    #[arg(long, default_value_t = 8)]
    pub factor: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PccAxisArg {
    Gene,
    Spot,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Dataset with observed expression.
    #[arg(long)]
    pub obs: PathBuf,
    /// Dataset with predicted expression; matched to `--obs` by spot id and gene name.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "gene")]
    pub pcc_axis: PccAxisArg,
    /// Number of best-predicted genes to print.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Args, Debug)]
pub struct ClusterEvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of k-means clusters; defaults to the number of annotation labels.
    #[arg(long)]
    pub k: Option<usize>,
    /// External `spot_id,label` CSV scored instead of running k-means.
    #[arg(long, conflicts_with = "k")]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub gene: String,
    /// Output PNG path; the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => error_exit_code(e),
        }
    }
}

pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Incompatible(_) => 4,
        Error::Io { .. } | Error::ExtractorBackend { .. } => 1,
        Error::SpotExtraction { source, .. } => error_exit_code(source),
        _ => 2,
    }
}

/// One record per invocation, written to the command's output directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config_digests: BTreeMap<String, String>,
    pub config: Option<serde_json::Value>,
    pub versions: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: i32,
    pub error: Option<String>,
}

impl RunManifest {
    fn input(&mut self, key: &str, p: &Path) {
        self.inputs.insert(key.into(), p.display().to_string());
    }

    fn output(&mut self, key: &str, p: &Path) {
        self.outputs.insert(key.into(), p.display().to_string());
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut manifest = RunManifest {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started_at: now(),
        ..Default::default()
    };
    manifest.versions.insert("histosge".into(), env!("CARGO_PKG_VERSION").into());
    manifest
        .versions
        .insert("checkpoint_format".into(), CHECKPOINT_VERSION.to_string());
    let (out_dir, result) = dispatch(&cli.command, &mut manifest);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    manifest.exit_code = code;
    manifest.error = result.err().map(|e| e.to_string());
    manifest.finished_at = now();
    if out_dir.is_dir() {
        let path = out_dir.join(MANIFEST_JSON);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        if let Err(e) = fs::write(&path, json) {
            eprintln!("error: could not write {}: {e}", path.display());
            return if code == 0 { 1 } else { code };
        }
    }
    code
}

fn dispatch(cmd: &Command, m: &mut RunManifest) -> (PathBuf, Result<(), CliError>) {
    match cmd {
        Command::Ingest(a) => {
            m.command = "ingest".into();
            (a.out.clone(), cmd_ingest(a, m))
        }
        Command::Synth(a) => {
            m.command = "synth".into();
            (a.out.clone(), cmd_synth(a, m))
        }
        Command::Split(a) => {
            m.command = "split".into();
            (a.out.clone(), cmd_split(a, m))
        }
        Command::Train(a) => {
            m.command = "train".into();
            (a.out.clone(), cmd_train(a, m))
        }
        Command::Predict(a) => {
            m.command = "predict".into();
            (a.out.clone(), cmd_predict(a, m))
        }
        Command::Upsample(a) => {
            m.command = "upsample".into();
            (a.out.clone(), cmd_upsample(a, m))
        }
        Command::Evaluate(a) => {
            m.command = "evaluate".into();
            (a.out.clone(), cmd_evaluate(a, m))
        }
        Command::ClusterEval(a) => {
            m.command = "cluster-eval".into();
            (a.out.clone(), cmd_cluster_eval(a, m))
        }
        Command::Plot(a) => {
            m.command = "plot".into();
            let dir = match a.out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            (dir, cmd_plot(a, m))
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn cmd_ingest(a: &IngestArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    let mut ds = load_dataset(&a.dataset)?;
    if a.normalize {
        let cfg = PreprocessConfig {
            n_hvg: a.n_hvg.unwrap_or(ds.n_genes()),
            normalize_target_sum: a.target_sum,
            ..Default::default()
        };
        m.config = Some(serde_json::json!({
            "normalize_target_sum": cfg.normalize_target_sum,
            "n_hvg": cfg.n_hvg,
        }));
        ds = preprocess_dataset(&ds, &cfg)?.0;
    }
    save_dataset_with(&ds, &a.out, a.format.into())?;
    m.output("dataset", &a.out);
    println!("slice: {}", ds.slice_id());
    println!("spots: {}", ds.n_spots());
    println!("genes: {}", ds.n_genes());
    println!("dropout rate: {:.6}", ds.dropout_rate());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, m: &mut RunManifest) -> Result<(), CliError> {
    let cfg = SynthConfig {
        grid_rows: a.rows,
        grid_cols: a.cols,
        pitch_px: a.pitch,
        n_genes: a.genes,
        n_textures: a.textures,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    for w in cfg.warnings(PreprocessConfig::default().patch_w) {
        eprintln!("warning: {w}");
    }
    let (ds, truth) = generate(&cfg)?;
    write_synthetic(&a.out, &ds, &truth)?;
    m.seed = Some(a.seed);
    let json = serde_json::to_value(&cfg).expect("config serializes");
    m.config_digests.insert("synth".into(), sha256_hex(json.to_string().as_bytes()));
    m.config = Some(json);
    m.output("dataset", &a.out);
    println!("spots: {}, genes: {}, textures: {}", ds.n_spots(), ds.n_genes(), cfg.n_textures);
    Ok(())
}

pub fn cmd_split(a: &SplitArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    m.seed = Some(a.seed);
    let ds = load_dataset(&a.dataset)?;
    let (train, test) = split_spots(&ds, a.fraction, a.seed)?;
    for (name, part) in [("train", &train), ("test", &test)] {
        let dir = a.out.join(name);
        save_dataset_with(part, &dir, ExpressionFormat::Csv)?;
        m.output(name, &dir);
    }
    println!("train: {} spots, test: {} spots", train.n_spots(), test.n_spots());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub preprocess: PatchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub gene_dim: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub pe_mode: Option<PeMode>,
    pub pe_table_size: Option<usize>,
    pub plain_mhsa: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub weight_decay: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub early_stopping_patience: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    pub patch_w: Option<u32>,
    pub patch_h: Option<u32>,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Model config with `d_model` and `gene_dim` defaulting to what the data implies.
    pub fn model_config(&self, d_model: usize, gene_dim: usize) -> ModelConfig {
        let d = ModelConfig::default();
        let s = &self.model;
        ModelConfig {
            d_model: s.d_model.unwrap_or(d_model),
            n_heads: s.n_heads.unwrap_or(d.n_heads),
            n_layers: s.n_layers.unwrap_or(d.n_layers),
            d_ff: s.d_ff.unwrap_or(d.d_ff),
            gene_dim: s.gene_dim.unwrap_or(gene_dim),
            dropout_rate: s.dropout_rate.unwrap_or(d.dropout_rate),
            pe_mode: s.pe_mode.unwrap_or(d.pe_mode),
            pe_table_size: s.pe_table_size.unwrap_or(d.pe_table_size),
            plain_mhsa: s.plain_mhsa.unwrap_or(d.plain_mhsa),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let s = &self.train;
        TrainConfig {
            epochs: s.epochs.unwrap_or(d.epochs),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            seed: s.seed.unwrap_or(d.seed),
            checkpoint_every: s.checkpoint_every.unwrap_or(d.checkpoint_every),
            optimizer: s.optimizer.unwrap_or(d.optimizer),
            weight_decay: s.weight_decay.unwrap_or(d.weight_decay),
            lr_schedule: s.lr_schedule.unwrap_or(d.lr_schedule),
            early_stopping_patience: s.early_stopping_patience.or(d.early_stopping_patience),
            checkpoint_dir: None,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        let d = PreprocessConfig::default();
        PreprocessConfig {
            patch_w: self.preprocess.patch_w.unwrap_or(d.patch_w),
            patch_h: self.preprocess.patch_h.unwrap_or(d.patch_h),
            ..d
        }
    }
}

pub fn cmd_train(a: &TrainArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    let file = match &a.config {
        Some(p) => {
            m.input("config", p);
            TrainFile::load(p)?
        }
        None => TrainFile::default(),
    };
    let ds = load_dataset(&a.dataset)?;
    let extractor = a.extractor.build()?;
    let cache = a.extractor.open_cache()?;
    let mcfg = file.model_config(extractor.embed_dim() + EXTRA_FEATURES, ds.n_genes());
    let mut tcfg = file.train_config();
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
    }
    let pcfg = file.preprocess_config();
    pcfg.validate()?;
    m.seed = Some(tcfg.seed);
    m.config_digests.insert("model".into(), mcfg.digest());
    let tjson = serde_json::to_value(&tcfg).expect("train config serializes");
    m.config_digests.insert("train".into(), sha256_hex(tjson.to_string().as_bytes()));
    m.config = Some(serde_json::json!({
        "model": mcfg,
        "train": tjson,
        "preprocess": { "patch_w": pcfg.patch_w, "patch_h": pcfg.patch_h },
        "extractor": extractor.name(),
    }));
    create_dir(&a.out)?;
    tcfg.checkpoint_dir = Some(a.out.clone());
    let opts = TrainOptions {
        preprocess: pcfg,
        cache: cache.as_ref(),
        parallel_extraction: !a.extractor.deterministic,
    };
    let (_, report) = train_with(&ds, extractor.as_ref(), &mcfg, &tcfg, &opts)?;
    let trace_path = a.out.join(LOSS_TRACE_CSV);
    write_loss_trace(&trace_path, &report.loss_trace)?;
    m.output("loss_trace", &trace_path);
    if let Some(ck) = &report.final_checkpoint {
        let bytes = fs::read(ck).map_err(|e| Error::io(ck, e))?;
        m.output("checkpoint", ck);
        m.outputs.insert("checkpoint_sha256".into(), sha256_hex(&bytes));
    }
    println!(
        "trained {} epochs ({} steps) in {:.1}s; final loss {:.6}",
        report.loss_trace.len(),
        report.steps,
        report.wall_clock_secs,
        report.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

struct LoadedModel {
    ckpt: Checkpoint,
    extractor: Box<dyn FeatureExtractor>,
    cache: Option<EmbeddingCache>,
}

fn load_model(checkpoint: &Path, ext: &ExtractorArgs, m: &mut RunManifest) -> Result<LoadedModel, CliError> {
    m.input("checkpoint", checkpoint);
    let ckpt = load_checkpoint(checkpoint)?;
    let extractor = ext.build()?;
    check_checkpoint(&ckpt, extractor.as_ref())?;
    m.config_digests.insert("model".into(), ckpt.model.config.digest());
    m.seed = Some(ckpt.meta.seed);
    Ok(LoadedModel {
        ckpt,
        extractor,
        cache: ext.open_cache()?,
    })
}

/// Predicts at `spots` and packages the result as a dataset sharing `ds`'s image.
fn predicted_dataset(
    lm: &LoadedModel,
    ds: &StDataset,
    spots: Vec<Spot>,
    batch_size: usize,
    parallel: bool,
) -> Result<StDataset, CliError> {
    let meta = &lm.ckpt.meta;
    let mut pcfg = PreprocessConfig::default();
    if meta.patch_w > 0 && meta.patch_h > 0 {
        pcfg.patch_w = meta.patch_w;
        pcfg.patch_h = meta.patch_h;
    }
    let cfg = PredictConfig {
        preprocess: pcfg,
        batch_size,
        parallel_extraction: parallel,
    };
    let mut pred = predict_cached(&lm.ckpt.model, ds, &spots, lm.extractor.as_ref(), &cfg, lm.cache.as_ref())?;
    // stored expression is non-negative by contract
    pred.mapv_inplace(|v| v.max(0.0));
    let gene_dim = lm.ckpt.model.config.gene_dim;
    let genes = if meta.gene_names.len() == gene_dim {
        meta.gene_names.clone()
    } else if ds.n_genes() == gene_dim {
        ds.gene_names().to_vec()
    } else {
        (0..gene_dim).map(|g| format!("gene_{g}")).collect()
    };
    let ids: HashSet<&str> = spots.iter().map(|s| s.spot_id.as_str()).collect();
    let annotations = ds.annotations().map(|a| {
        a.iter()
            .filter(|(k, _)| ids.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<BTreeMap<_, _>>()
    });
    Ok(StDataset::new(ds.slice_id(), ds.image_arc(), spots, pred, genes, annotations)?)
}

pub fn cmd_predict(a: &PredictArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    let lm = load_model(&a.checkpoint, &a.extractor, m)?;
    let ds = load_dataset(&a.dataset)?;
    let out = predicted_dataset(&lm, &ds, ds.spots().to_vec(), a.batch_size, !a.extractor.deterministic)?;
    save_dataset_with(&out, &a.out, ExpressionFormat::Csv)?;
    m.output("dataset", &a.out);
    println!("predicted {} genes at {} spots", out.n_genes(), out.n_spots());
    Ok(())
}

pub fn cmd_upsample(a: &UpsampleArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    let lm = load_model(&a.checkpoint, &a.extractor, m)?;
    let ds = load_dataset(&a.dataset)?;
    let (scheme, spots) = upsample_spots(ds.spots(), a.factor, ds.image().dimensions())?;
    m.config = Some(serde_json::to_value(&scheme).expect("scheme serializes"));
    let n_new = spots.len() - ds.n_spots();
    let out = predicted_dataset(&lm, &ds, spots, a.batch_size, !a.extractor.deterministic)?;
    save_dataset_with(&out, &a.out, ExpressionFormat::Csv)?;
    m.output("dataset", &a.out);
    println!(
        "{}-fold upsampling: {} measured + {} constructed = {} spots",
        a.factor,
        ds.n_spots(),
        n_new,
        out.n_spots()
    );
    Ok(())
}

/// Rows of `pred` reordered to `obs`'s spots and genes.
pub fn align_prediction(obs: &StDataset, pred: &StDataset) -> Result<Array2<f64>, CliError> {
    let gene_idx: HashMap<&str, usize> = pred
        .gene_names()
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let missing_genes: Vec<String> = obs
        .gene_names()
        .iter()
        .filter(|g| !gene_idx.contains_key(g.as_str()))
        .cloned()
        .collect();
    if missing_genes.len() == obs.n_genes() {
        return Err(CliError::Usage("observed and predicted datasets share no genes".into()));
    }
    if !missing_genes.is_empty() {
        return Err(Error::Alignment {
            msg: "genes missing from the predictions".into(),
            offenders: missing_genes,
        }
        .into());
    }
    let spot_idx = pred.spot_index();
    let missing: Vec<String> = obs
        .spots()
        .iter()
        .filter(|s| !spot_idx.contains_key(s.spot_id.as_str()))
        .map(|s| s.spot_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Alignment {
            msg: "spots missing from the predictions".into(),
            offenders: missing,
        }
        .into());
    }
    let cols: Vec<usize> = obs.gene_names().iter().map(|g| gene_idx[g.as_str()]).collect();
    let pe = pred.expression();
    Ok(Array2::from_shape_fn((obs.n_spots(), obs.n_genes()), |(i, j)| {
        pe[[spot_idx[obs.spots()[i].spot_id.as_str()], cols[j]]]
    }))
}

pub fn cmd_evaluate(a: &EvaluateArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("obs", &a.obs);
    m.input("pred", &a.pred);
    let obs = load_dataset(&a.obs)?;
    let pred = load_dataset(&a.pred)?;
    let aligned = align_prediction(&obs, &pred)?;
    let axis = match a.pcc_axis {
        PccAxisArg::Gene => PccAxis::Gene,
        PccAxisArg::Spot => PccAxis::Spot,
    };
    let report = evaluate_with(obs.expression(), &aligned, axis)?.with_gene_names(obs.gene_names());
    create_dir(&a.out)?;
    for (name, text) in [
        ("metrics.csv", report.to_csv()),
        ("metrics.json", report.to_json()),
        ("per_gene.csv", report.per_gene_csv()),
    ] {
        let p = a.out.join(name);
        write_text(&p, &text)?;
        m.output(name, &p);
    }
    print!("{}", report.to_table());
    let ranked = report.ranked_genes();
    if a.top > 0 && !ranked.is_empty() {
        println!("top genes by PCC:");
        for (g, p) in ranked.iter().take(a.top) {
            println!("  {g:<20} {p:.4}");
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterEvalReport {
    pub ari: f64,
    pub source: String,
    pub k: Option<usize>,
    pub n_spots: usize,
}

pub fn cmd_cluster_eval(a: &ClusterEvalArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    let ds = load_dataset(&a.dataset)?;
    let ann = ds
        .annotations()
        .filter(|a| !a.is_empty())
        .ok_or_else(|| CliError::Usage(format!("dataset {} has no annotations", a.dataset.display())))?;
    let rows: Vec<usize> = ds
        .spots()
        .iter()
        .enumerate()
        .filter(|(_, s)| ann.contains_key(&s.spot_id))
        .map(|(i, _)| i)
        .collect();
    let truth: Vec<&String> = rows.iter().map(|&i| &ann[&ds.spots()[i].spot_id]).collect();
    create_dir(&a.out)?;
    let (predicted, source, k): (Vec<String>, String, Option<usize>) = match &a.labels {
        Some(path) => {
            m.input("labels", path);
            let ext = read_labels_csv(path)?;
            let missing: Vec<String> = rows
                .iter()
                .map(|&i| &ds.spots()[i].spot_id)
                .filter(|id| !ext.contains_key(*id))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(Error::Alignment {
                    msg: "annotated spots missing from the labels file".into(),
                    offenders: missing,
                }
                .into());
            }
            let labels = rows.iter().map(|&i| ext[&ds.spots()[i].spot_id].clone()).collect();
            (labels, path.display().to_string(), None)
        }
        None => {
            let k = a
                .k
                .unwrap_or_else(|| truth.iter().collect::<HashSet<_>>().len().max(2));
            m.seed = Some(a.seed);
            let x = ds.expression().select(ndarray::Axis(0), &rows);
            let labels = kmeans_domains(&x, k, a.seed)?;
            let mut csv = String::from("spot_id,cluster\n");
            for (&i, l) in rows.iter().zip(&labels) {
                csv.push_str(&format!("{},{}\n", ds.spots()[i].spot_id, l));
            }
            let p = a.out.join("clusters.csv");
            write_text(&p, &csv)?;
            m.output("clusters", &p);
            (labels.iter().map(|l| l.to_string()).collect(), "kmeans".into(), Some(k))
        }
    };
    let score = ari(&predicted, &truth)?;
    let report = ClusterEvalReport {
        ari: score,
        source,
        k,
        n_spots: rows.len(),
    };
    let p = a.out.join("cluster_eval.json");
    write_text(&p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    m.output("report", &p);
    println!("ARI: {score:.6}");
    Ok(())
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Piecewise-linear viridis-like colormap on `[0, 1]`.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

const PLOT_MAX_SIDE: f64 = 1200.0;

/// Spot scatter on a white canvas: measured spots as discs, constructed spots
/// as smaller squares drawn underneath; glyph size scales with spot spacing.
pub fn render_gene_plot(ds: &StDataset, gene: usize) -> RgbImage {
    let (w, h) = ds.image().dimensions();
    let scale = (PLOT_MAX_SIDE / w.max(h) as f64).min(1.0);
    let (cw, ch) = (
        ((w as f64 * scale).ceil() as u32).max(1),
        ((h as f64 * scale).ceil() as u32).max(1),
    );
    let mut img = RgbImage::from_pixel(cw, ch, Rgb([255, 255, 255]));
    // spacing over every spot, so constructed spots keep room between glyphs
    let all: Vec<Spot> = ds.spots().iter().map(|s| Spot { measured: true, ..s.clone() }).collect();
    let r = nearest_neighbor_spacing(&all).unwrap_or(10.0) * scale;
    let col = ds.expression().column(gene);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let disc = (0.45 * r).max(1.0);
    let half = (0.35 * r).max(1.0);
    for pass_measured in [false, true] {
        for (s, &v) in ds.spots().iter().zip(col.iter()) {
            if s.measured != pass_measured {
                continue;
            }
            let color = colormap(norm(v));
            let (cx, cy) = (s.x_px as f64 * scale, s.y_px as f64 * scale);
            let ext = if s.measured { disc } else { half };
            let x0 = (cx - ext).floor().max(0.0) as u32;
            let y0 = (cy - ext).floor().max(0.0) as u32;
            let x1 = ((cx + ext).ceil() as u32).min(cw - 1);
            let y1 = ((cy + ext).ceil() as u32).min(ch - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let inside = if s.measured {
                        dx * dx + dy * dy <= disc * disc
                    } else {
                        dx.abs() <= half && dy.abs() <= half
                    };
                    if inside {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
    img
}

/// Gene names closest to `query`, best first.
pub fn close_matches(query: &str, names: &[String], n: usize) -> Vec<String> {
    let q = query.to_lowercase();
    let mut scored: Vec<(f64, &String)> = names
        .iter()
        .map(|g| (strsim::jaro_winkler(&q, &g.to_lowercase()), g))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(n).map(|(_, g)| g.clone()).collect()
}

pub fn cmd_plot(a: &PlotArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input("dataset", &a.dataset);
    let ds = load_dataset(&a.dataset)?;
    let gene = ds.gene_names().iter().position(|g| g == &a.gene).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown gene '{}'; close matches: {}",
            a.gene,
            close_matches(&a.gene, ds.gene_names(), 5).join(", ")
        ))
    })?;
    let img = render_gene_plot(&ds, gene);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    img.save_with_format(&a.out, image::ImageFormat::Png).map_err(Error::from)?;
    m.output("plot", &a.out);
    println!("wrote {}", a.out.display());
    Ok(())
}
