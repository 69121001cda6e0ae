//! The `otter` command-line driver.
//!
//! Every write command takes a mandatory `--out` and records a
//! [`RunManifest`] (command line, effective configs, input and artifact
//! checksums) next to its outputs. `otter replay` re-executes a manifest into
//! a fresh location and compares artifact checksums.
//!
//! Exit codes: 0 success, 1 usage / configuration / input error, 2 runtime
//! numeric error or replay mismatch. Logs go to standard error; data only to
//! files.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OtterError, Result};
use crate::evaluation::{average_noise_stats, compose_bench, sample_noise_stats, zero_shot_report};
use crate::numerics::Matrix;
use crate::sinkhorn::{sinkhorn, sinkhorn_converged, SinkhornConfig};
use crate::synthdata::{
    generate, generate_attributes, generate_with_holdout, load_embeddings, save_embeddings,
    AttributeSynthConfig, SynthConfig, SynthDataset,
};
use crate::trainer::{
    train_shuffled, Checkpoint, EncoderState, Method, TrainConfig, DEFAULT_INIT_INV_TEMP,
};

#[derive(Debug, Parser)]
#[command(
    name = "otter",
    version,
    about = "Contrastive image-text training with optimal-transport soft targets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train linear encoders on a dataset.
    Train(TrainArgs),
    /// Zero-shot flat hit@K of a checkpoint.
    Eval(EvalArgs),
    /// Run a grid or list of training configs and tabulate held-out FH@1.
    Sweep(SweepArgs),
    /// Matching-probability statistics of a checkpoint over random batches.
    NoiseStats(NoiseStatsArgs),
    /// Compositional retrieval benchmark (OR / IOR / TOR).
    ComposeBench(ComposeArgs),
    /// Standalone Sinkhorn solver: similarity matrix in, transport plan out.
    Sinkhorn(SinkhornArgs),
    /// Re-run a recorded command into a new location and compare checksums.
    Replay(ReplayArgs),
}

fn probability(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is out of range, must be in [0, 1]"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is out of range, must be finite and >= 0"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is out of range, must be finite and > 0"))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of concepts.
    #[arg(long, default_value_t = 8)]
    pub concepts: usize,
    /// Samples per concept.
    #[arg(long, default_value_t = 128)]
    pub per_concept: usize,
    /// Image feature dimension.
    #[arg(long, default_value_t = 32)]
    pub d_img: usize,
    /// Text feature dimension.
    #[arg(long, default_value_t = 32)]
    pub d_txt: usize,
    /// Isotropic Gaussian feature noise (per coordinate).
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub sigma: f64,
    /// Probability that a caption is drawn from a different concept.
    #[arg(long, default_value_t = 0.0, value_parser = probability)]
    pub swap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a clean held-out set (same prototypes, no swaps) here.
    #[arg(long)]
    pub holdout_out: Option<PathBuf>,
    /// Held-out images per concept.
    #[arg(long, default_value_t = 32)]
    pub holdout_per_concept: usize,
    /// Generate attribute-annotated data for `compose-bench` instead.
    #[arg(long)]
    pub attributes: bool,
    /// Attribute universe size (with --attributes).
    #[arg(long, default_value_t = 64)]
    pub n_attributes: usize,
    /// Base attributes per concept (with --attributes).
    #[arg(long, default_value_t = 16)]
    pub attrs_per_concept: usize,
    /// Per-sample probability of dropping a base attribute (with --attributes).
    #[arg(long, default_value_t = 0.1, value_parser = probability)]
    pub attr_drop: f64,
    /// Per-sample probability of adding each other attribute (with --attributes).
    #[arg(long, default_value_t = 0.03, value_parser = probability)]
    pub attr_add: f64,
    /// Output file (`.csv`/`.tsv` for the text variant, binary otherwise).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (embedding file).
    #[arg(long)]
    pub data: PathBuf,
    /// One of infonce, ls, kd, otter.
    #[arg(long, default_value = "otter")]
    pub method: Method,
    /// Weight of the one-hot term [default: 0.9 for ls, 0.5 otherwise].
    #[arg(long, value_parser = probability)]
    pub alpha: Option<f64>,
    /// Weight of image-image similarity in the transport cost.
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    pub gamma_v: f64,
    /// Weight of text-text similarity in the transport cost.
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    pub gamma_t: f64,
    /// Diagonal penalty on the similarity matrix.
    #[arg(long, default_value_t = 100.0, value_parser = non_negative)]
    pub eta: f64,
    /// Entropic regularization.
    #[arg(long, default_value_t = 0.15, value_parser = positive)]
    pub lambda: f64,
    /// Sinkhorn row/column sweeps.
    #[arg(long, default_value_t = 5)]
    pub sinkhorn_iters: usize,
    /// Use the current student as teacher instead of an EMA copy.
    #[arg(long)]
    pub no_ema: bool,
    #[arg(long, default_value_t = 0.999, value_parser = probability)]
    pub ema_momentum: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Initial learning rate (cosine annealed to 0).
    #[arg(long, default_value_t = 3e-3, value_parser = non_negative)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9, value_parser = probability)]
    pub sgd_momentum: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    pub d_emb: usize,
    /// Initial softmax temperature (learned through its log inverse).
    #[arg(long, default_value_t = 0.07, value_parser = positive)]
    pub init_temperature: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            alpha: self.alpha.unwrap_or(self.method.default_alpha()),
            gamma_v: self.gamma_v,
            gamma_t: self.gamma_t,
            eta: self.eta,
            lambda: self.lambda,
            sinkhorn_iters: self.sinkhorn_iters,
            use_ema_teacher: !self.no_ema,
            ema_momentum: self.ema_momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            d_emb: self.d_emb,
            init_inv_temp: if self.init_temperature == 0.07 {
                DEFAULT_INIT_INV_TEMP
            } else {
                1.0 / self.init_temperature
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Score with the EMA teacher instead of the student.
    #[arg(long)]
    pub teacher: bool,
}

impl ModelArgs {
    fn load(&self) -> Result<(Checkpoint, EncoderState, SynthDataset)> {
        let ck = Checkpoint::load(&self.checkpoint)?;
        let model = if self.teacher {
            ck.teacher.params.clone()
        } else {
            ck.student.clone()
        };
        let data = load_embeddings(&self.data)?;
        if model.w_image.rows() != data.d_img_in() || model.w_text.rows() != data.d_txt_in() {
            return Err(OtterError::DimensionMismatch(format!(
                "checkpoint expects {}/{} input features, dataset has {}/{}",
                model.w_image.rows(),
                model.w_text.rows(),
                data.d_img_in(),
                data.d_txt_in()
            )));
        }
        Ok((ck, model, data))
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Values of K for flat hit@K [default: 1,5,10, keeping those not above
    /// the class count].
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep file (TOML): `seeds`, `data`/`eval_data` or `[synth]`, `[base]`,
    /// `[grid]` and/or `[[run]]`.
    #[arg(long)]
    pub sweep: PathBuf,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NoiseStatsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    pub batch_sizes: Vec<usize>,
    /// Random batches per batch size.
    #[arg(long, default_value_t = 1000)]
    pub n_batches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Text→image probabilities (columns) instead of image→text.
    #[arg(long)]
    pub transposed: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Minimum shared attributes between the two images of a query.
    #[arg(long, default_value_t = 10)]
    pub min_common: usize,
    #[arg(long, default_value_t = 500)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SinkhornArgs {
    /// Square similarity matrix, comma-separated, one row per line, no header.
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, default_value_t = 0.15, value_parser = positive)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Iterate to this marginal tolerance instead of a fixed sweep count.
    #[arg(long, value_parser = positive)]
    pub tol: Option<f64>,
    /// Sweep cap with --tol.
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    /// Output file for the plan (same layout as the input).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest written by a previous run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the replay writes (must differ from the recorded output).
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one command execution, sufficient to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, with path arguments made absolute.
    pub args: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub synth_config: Option<serde_json::Value>,
    pub seeds: Vec<u64>,
    pub output: String,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Artifact name (relative to the output directory, or the output file
    /// name) → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub const FORMAT: &'static str = "otter-manifest";

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| OtterError::FormatError {
            location: format!("{}: line {}", path.display(), e.line()),
            message: e.to_string(),
        })?;
        if m.format != Self::FORMAT {
            return Err(OtterError::FormatError {
                location: path.display().to_string(),
                message: format!("not a manifest (format `{}`)", m.format),
            });
        }
        Ok(m)
    }
}

/// Where a command's manifest lives: inside an output directory, or next to
/// an output file.
pub fn manifest_path(command: &str, out: &Path) -> PathBuf {
    if writes_single_file(command) {
        let mut name = out
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    } else {
        out.join("manifest.json")
    }
}

fn writes_single_file(command: &str) -> bool {
    matches!(command, "gen-data" | "sinkhorn")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

const PATH_FLAGS: [&str; 8] = [
    "--data",
    "--checkpoint",
    "--sweep",
    "--matrix",
    "--out",
    "--manifest",
    "--holdout-out",
    "--eval-data",
];

/// Rewrites the values of path flags to absolute paths so a manifest can be
/// replayed from any working directory.
fn absolutize_args(args: &[String]) -> Vec<String> {
    let abs = |p: &str| {
        std::path::absolute(p)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| p.to_string())
    };
    let mut out = Vec::with_capacity(args.len());
    let mut take_path = false;
    for a in args {
        if take_path {
            out.push(abs(a));
            take_path = false;
        } else if let Some((flag, value)) =
            a.split_once('=').filter(|(f, _)| PATH_FLAGS.contains(f))
        {
            out.push(format!("{flag}={}", abs(value)));
        } else {
            take_path = PATH_FLAGS.contains(&a.as_str());
            out.push(a.clone());
        }
    }
    out
}

fn replace_out(args: &[String], new_out: &Path) -> Vec<String> {
    let new_out = std::path::absolute(new_out)
        .unwrap_or_else(|_| new_out.to_path_buf())
        .to_string_lossy()
        .into_owned();
    let mut out = Vec::with_capacity(args.len());
    let mut replace_next = false;
    for a in args {
        if replace_next {
            out.push(new_out.clone());
            replace_next = false;
        } else if a.starts_with("--out=") {
            out.push(format!("--out={new_out}"));
        } else {
            replace_next = a == "--out";
            out.push(a.clone());
        }
    }
    out
}

/// Collected while a command runs; turned into a [`RunManifest`] at the end.
struct Recorder {
    command: String,
    args: Vec<String>,
    started: u64,
    train_config: Option<TrainConfig>,
    synth_config: Option<serde_json::Value>,
    seeds: Vec<u64>,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<PathBuf>,
}

impl Recorder {
    fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: absolutize_args(args),
            started: now_unix(),
            train_config: None,
            synth_config: None,
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let abs = std::path::absolute(path)?;
        self.inputs
            .insert(abs.to_string_lossy().into_owned(), sha256_file(path)?);
        Ok(())
    }

    fn finish(self, out: &Path) -> Result<RunManifest> {
        let mut artifacts = BTreeMap::new();
        for a in &self.artifacts {
            let name = if writes_single_file(&self.command) {
                a.file_name().map(|n| n.to_string_lossy().into_owned())
            } else {
                a.strip_prefix(out)
                    .ok()
                    .map(|p| p.to_string_lossy().into_owned())
            }
            .unwrap_or_else(|| a.to_string_lossy().into_owned());
            artifacts.insert(name, sha256_file(a)?);
        }
        let manifest = RunManifest {
            format: RunManifest::FORMAT.into(),
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            args: self.args,
            train_config: self.train_config,
            synth_config: self.synth_config,
            seeds: self.seeds,
            output: std::path::absolute(out)?.to_string_lossy().into_owned(),
            inputs: self.inputs,
            artifacts,
            started_unix: self.started,
            finished_unix: now_unix(),
        };
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| OtterError::Io(e.to_string()))?;
        fs::write(manifest_path(&self.command, out), text)?;
        Ok(manifest)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::NoiseStats(_) => "noise-stats",
        Command::ComposeBench(_) => "compose-bench",
        Command::Sinkhorn(_) => "sinkhorn",
        Command::Replay(_) => "replay",
    }
}

/// Exit code for an error: 2 for numeric failures during compute, 1 otherwise.
pub fn exit_code(err: &OtterError) -> i32 {
    match err {
        OtterError::AtStep { source, .. } => exit_code(source),
        OtterError::NonFiniteLoss
        | OtterError::NonFinite(_)
        | OtterError::ZeroRowNorm(_)
        | OtterError::DegenerateRow(_)
        | OtterError::NotNormalized(_)
        | OtterError::ReplayMismatch(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let rest: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli.command, &rest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs an already parsed command. `args` are the raw arguments after the
/// program name, recorded in the manifest.
pub fn execute(command: &Command, args: &[String]) -> Result<()> {
    let name = command_name(command);
    match command {
        Command::GenData(a) => cmd_gen_data(a, Recorder::new(name, args)).map(drop),
        Command::Train(a) => cmd_train(a, Recorder::new(name, args)).map(drop),
        Command::Eval(a) => cmd_eval(a, Recorder::new(name, args)).map(drop),
        Command::Sweep(a) => cmd_sweep(a, Recorder::new(name, args)).map(drop),
        Command::NoiseStats(a) => cmd_noise_stats(a, Recorder::new(name, args)).map(drop),
        Command::ComposeBench(a) => cmd_compose_bench(a, Recorder::new(name, args)).map(drop),
        Command::Sinkhorn(a) => cmd_sinkhorn(a, Recorder::new(name, args)).map(drop),
        Command::Replay(a) => {
            let outcome = replay(&a.manifest, &a.out)?;
            if outcome.mismatched.is_empty() {
                info!("replay identical: {} artifacts", outcome.matched.len());
                Ok(())
            } else {
                Err(OtterError::ReplayMismatch(outcome.mismatched.join(", ")))
            }
        }
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| OtterError::Io(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> OtterError {
    OtterError::Io(e.to_string())
}

fn json_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| OtterError::Io(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| OtterError::Io(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs, mut rec: Recorder) -> Result<RunManifest> {
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let base = SynthConfig {
        n_concepts: a.concepts,
        samples_per_concept: a.per_concept,
        d_img_in: a.d_img,
        d_txt_in: a.d_txt,
        feature_noise_sigma: a.sigma,
        caption_swap_prob: a.swap,
        seed: a.seed,
    };
    rec.seeds.push(a.seed);
    let data = if a.attributes {
        let cfg = AttributeSynthConfig {
            n_concepts: a.concepts,
            samples_per_concept: a.per_concept,
            n_attributes: a.n_attributes,
            attributes_per_concept: a.attrs_per_concept,
            drop_prob: a.attr_drop,
            add_prob: a.attr_add,
            d_img_in: a.d_img,
            d_txt_in: a.d_txt,
            feature_noise_sigma: a.sigma,
            caption_swap_prob: a.swap,
            seed: a.seed,
        };
        rec.synth_config = Some(json_value(&cfg)?);
        generate_attributes(&cfg)?
    } else {
        rec.synth_config = Some(json_value(&base)?);
        match &a.holdout_out {
            Some(path) => {
                let (train, test) = generate_with_holdout(&base, a.holdout_per_concept)?;
                save_embeddings(path, &test)?;
                rec.artifacts.push(path.clone());
                info!(
                    "wrote {} held-out samples to {}",
                    test.len(),
                    path.display()
                );
                train
            }
            None => generate(&base)?,
        }
    };
    save_embeddings(&a.out, &data)?;
    rec.artifacts.push(a.out.clone());
    info!(
        "wrote {} pairs ({} concepts, d_img {}, d_txt {}, off-concept captions {:.3}) to {}",
        data.len(),
        data.n_concepts().unwrap_or(0),
        data.d_img_in(),
        data.d_txt_in(),
        data.off_concept_fraction().unwrap_or(0.0),
        a.out.display()
    );
    rec.finish(&a.out)
}

fn write_train_log(path: &Path, outcome: &crate::trainer::TrainOutcome) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "step",
        "epoch",
        "lr",
        "total",
        "info_nce_v",
        "info_nce_t",
        "distill_v",
        "distill_t",
    ])
    .map_err(csv_err)?;
    for s in &outcome.log.steps {
        let l = &s.loss;
        w.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            s.lr.to_string(),
            l.total.to_string(),
            l.info_nce_v.to_string(),
            l.info_nce_t.to_string(),
            l.distill_v.to_string(),
            l.distill_t.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, mut rec: Recorder) -> Result<RunManifest> {
    let cfg = a.config();
    cfg.validate()?;
    create_dir(&a.out)?;
    rec.input(&a.data)?;
    let data = load_embeddings(&a.data)?;
    info!(
        "training {} on {} pairs: alpha {}, lambda {}, iters {}, gamma {}/{}, eta {}, ema {}",
        cfg.method,
        data.len(),
        cfg.alpha,
        cfg.lambda,
        cfg.sinkhorn_iters,
        cfg.gamma_v,
        cfg.gamma_t,
        cfg.eta,
        if cfg.use_ema_teacher { "on" } else { "off" }
    );
    let outcome = train_shuffled(&cfg, &data.pairs)?;
    let ck_path = a.out.join("checkpoint.json");
    Checkpoint::new(&cfg, &outcome).save(&ck_path)?;
    let log_path = a.out.join("train_log.csv");
    write_train_log(&log_path, &outcome)?;
    rec.artifacts.extend([ck_path, log_path]);
    info!(
        "{} steps, loss {:.4} -> {:.4}",
        outcome.steps,
        outcome.log.first_loss().unwrap_or(f64::NAN),
        outcome.log.last_loss().unwrap_or(f64::NAN)
    );
    rec.seeds.push(cfg.seed);
    rec.train_config = Some(cfg);
    rec.finish(&a.out)
}

fn fingerprint(cfg: &TrainConfig) -> Result<String> {
    let text = serde_json::to_string(cfg).map_err(|e| OtterError::Io(e.to_string()))?;
    Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
}

fn cmd_eval(a: &EvalArgs, mut rec: Recorder) -> Result<RunManifest> {
    create_dir(&a.out)?;
    rec.input(&a.model.checkpoint)?;
    rec.input(&a.model.data)?;
    let (ck, model, data) = a.model.load()?;
    let ks = match &a.ks {
        Some(ks) => ks.clone(),
        None => {
            let classes = data.class_text_features()?.rows();
            let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= classes).collect();
            if ks.len() < 3 {
                warn!("only {classes} classes: reporting FH@{ks:?}");
            }
            ks
        }
    };
    let report = zero_shot_report(&model, &data, &ks, &fingerprint(&ck.config)?)?;
    let csv_path = a.out.join("eval_report.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["k", "flat_hit", "n_images", "config_fingerprint"])
        .map_err(csv_err)?;
    for (k, v) in &report.flat_hit_at {
        info!("FH@{k} = {v:.4}");
        w.write_record([
            k.to_string(),
            v.to_string(),
            report.n_images.to_string(),
            report.config_fingerprint.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = a.out.join("eval_report.json");
    write_json(&json_path, &report)?;
    rec.artifacts.extend([csv_path, json_path]);
    rec.seeds.push(ck.config.seed);
    rec.train_config = Some(ck.config);
    rec.finish(&a.out)
}

fn cmd_noise_stats(a: &NoiseStatsArgs, mut rec: Recorder) -> Result<RunManifest> {
    create_dir(&a.out)?;
    rec.input(&a.model.checkpoint)?;
    rec.input(&a.model.data)?;
    let (ck, model, data) = a.model.load()?;
    let summary_path = a.out.join("noise_stats.csv");
    let batches_path = a.out.join("noise_stats_batches.csv");
    let mut summary = csv_writer(&summary_path)?;
    let mut per_batch = csv_writer(&batches_path)?;
    summary
        .write_record([
            "batch_size",
            "n_batches",
            "paired_mean",
            "unpaired_mean",
            "unpaired_max_mean",
        ])
        .map_err(csv_err)?;
    per_batch
        .write_record([
            "batch_size",
            "batch",
            "paired_mean",
            "unpaired_mean",
            "unpaired_max_mean",
        ])
        .map_err(csv_err)?;
    for &b in &a.batch_sizes {
        let stats = sample_noise_stats(&model, &data.pairs, b, a.n_batches, a.seed, a.transposed)?;
        for (i, s) in stats.iter().enumerate() {
            per_batch
                .write_record([
                    b.to_string(),
                    i.to_string(),
                    s.paired_mean.to_string(),
                    s.unpaired_mean.to_string(),
                    s.unpaired_max_mean.to_string(),
                ])
                .map_err(csv_err)?;
        }
        let avg = average_noise_stats(&stats)?;
        info!(
            "batch {b}: paired {:.4}, unpaired avg {:.6}, unpaired max {:.4}",
            avg.paired_mean, avg.unpaired_mean, avg.unpaired_max_mean
        );
        summary
            .write_record([
                b.to_string(),
                avg.n_batches.to_string(),
                avg.paired_mean.to_string(),
                avg.unpaired_mean.to_string(),
                avg.unpaired_max_mean.to_string(),
            ])
            .map_err(csv_err)?;
    }
    summary.flush()?;
    per_batch.flush()?;
    rec.artifacts.extend([summary_path, batches_path]);
    rec.seeds.push(a.seed);
    rec.train_config = Some(ck.config);
    rec.finish(&a.out)
}

fn cmd_compose_bench(a: &ComposeArgs, mut rec: Recorder) -> Result<RunManifest> {
    create_dir(&a.out)?;
    rec.input(&a.model.checkpoint)?;
    rec.input(&a.model.data)?;
    let (ck, model, data) = a.model.load()?;
    let report = compose_bench(&model, &data, a.min_common, a.n_queries, a.seed)?;
    let path = a.out.join("compose.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "row",
        "or",
        "ior",
        "tor",
        "n_queries",
        "n_empty_text",
        "n_empty_image",
    ])
    .map_err(csv_err)?;
    for (row, s) in [
        ("model", report.model),
        ("random_baseline", report.random_baseline),
    ] {
        info!("{row}: OR {:.4}, IOR {:.4}, TOR {:.4}", s.or, s.ior, s.tor);
        w.write_record([
            row.to_string(),
            s.or.to_string(),
            s.ior.to_string(),
            s.tor.to_string(),
            s.n_queries.to_string(),
            s.n_empty_text.to_string(),
            s.n_empty_image.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    rec.artifacts.push(path);
    rec.seeds.push(a.seed);
    rec.train_config = Some(ck.config);
    rec.finish(&a.out)
}

/// Reads a headerless comma-separated numeric matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| OtterError::Io(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| OtterError::FormatError {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| OtterError::FormatError {
                    location: format!("line {}, column {}", i + 1, j + 1),
                    message: format!("not a number: `{f}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    if n == 0 {
        return Err(OtterError::FormatError {
            location: path.display().to_string(),
            message: "empty matrix".into(),
        });
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(OtterError::FormatError {
            location: format!("line {}", bad + 1),
            message: format!("expected {cols} columns"),
        });
    }
    let m = Matrix::from_vec(n, cols, rows.concat())?;
    if let Some(i) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(OtterError::NonFiniteValue(i));
    }
    Ok(m)
}

fn cmd_sinkhorn(a: &SinkhornArgs, mut rec: Recorder) -> Result<RunManifest> {
    rec.input(&a.matrix)?;
    let s = read_matrix_csv(&a.matrix)?;
    let plan = match a.tol {
        Some(tol) => sinkhorn_converged(&s, a.lambda, tol, a.max_iter)?,
        None => sinkhorn(&s, &SinkhornConfig::new(a.lambda, a.iters))?,
    };
    info!(
        "{} sweeps, row error {:.3e}, column error {:.3e}{}",
        plan.iterations,
        plan.row_marginal_error,
        plan.col_marginal_error,
        if a.tol.is_some() && !plan.converged {
            " (not converged)"
        } else {
            ""
        }
    );
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&a.out)
        .map_err(csv_err)?;
    for row in plan.matrix.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    rec.artifacts.push(a.out.clone());
    rec.finish(&a.out)
}

/// Sweep file contents.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Training data file (relative to the sweep file).
    pub data: Option<PathBuf>,
    /// Evaluation data file; defaults to the training data.
    pub eval_data: Option<PathBuf>,
    /// Synthetic data settings when no `data` is given.
    pub synth: Option<SweepSynth>,
    #[serde(default)]
    pub base: BTreeMap<String, toml::Value>,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default)]
    pub run: Vec<BTreeMap<String, toml::Value>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSynth {
    #[serde(flatten)]
    pub config: SynthConfig,
    #[serde(default = "default_holdout")]
    pub holdout_per_concept: usize,
}

fn default_holdout() -> usize {
    32
}

/// One distinct config of a sweep, with the keys that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub overrides: BTreeMap<String, String>,
    pub config: TrainConfig,
}

fn toml_to_json(v: &toml::Value) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| OtterError::ConfigInvalid(e.to_string()))
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Effective config: method defaults, then `base`, then the point's overrides.
fn build_config(
    base: &BTreeMap<String, toml::Value>,
    point: &BTreeMap<String, toml::Value>,
) -> Result<TrainConfig> {
    let method_value = point.get("method").or_else(|| base.get("method"));
    let method = match method_value {
        Some(v) => display_value(v).parse()?,
        None => Method::Otter,
    };
    let mut obj = json_value(&TrainConfig::for_method(method))?;
    let fields = obj
        .as_object_mut()
        .ok_or_else(|| OtterError::ConfigInvalid("config is not an object".into()))?;
    for (k, v) in base.iter().chain(point) {
        if !fields.contains_key(k) {
            return Err(OtterError::ConfigInvalid(format!(
                "unknown config key `{k}`"
            )));
        }
        fields.insert(k.clone(), toml_to_json(v)?);
    }
    let cfg: TrainConfig =
        serde_json::from_value(obj).map_err(|e| OtterError::ConfigInvalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Expands the grid (cross product over sorted keys) followed by the explicit
/// runs, dropping configs identical to an earlier one.
pub fn expand_sweep(file: &SweepFile) -> Result<Vec<SweepPoint>> {
    let mut points: Vec<BTreeMap<String, toml::Value>> = Vec::new();
    if !file.grid.is_empty() {
        let mut acc: Vec<BTreeMap<String, toml::Value>> = vec![BTreeMap::new()];
        for (k, values) in &file.grid {
            if values.is_empty() {
                return Err(OtterError::ConfigInvalid(format!(
                    "grid key `{k}` has no values"
                )));
            }
            acc = acc
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(k.clone(), v.clone());
                        q
                    })
                })
                .collect();
        }
        points.extend(acc);
    }
    points.extend(file.run.iter().cloned());
    if points.is_empty() {
        return Err(OtterError::ConfigInvalid(
            "sweep file defines no runs (needs [grid] or [[run]])".into(),
        ));
    }

    let mut out: Vec<SweepPoint> = Vec::new();
    for p in points {
        let config = build_config(&file.base, &p)?;
        if out.iter().any(|q| q.config == config) {
            warn!("duplicate sweep config {p:?} skipped");
            continue;
        }
        out.push(SweepPoint {
            overrides: p
                .iter()
                .map(|(k, v)| (k.clone(), display_value(v)))
                .collect(),
            config,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct SweepResult {
    point: usize,
    seed: u64,
    outcome: std::result::Result<(f64, f64), String>,
}

fn cmd_sweep(a: &SweepArgs, mut rec: Recorder) -> Result<RunManifest> {
    let text = fs::read_to_string(&a.sweep)?;
    if text.trim().is_empty() {
        return Err(OtterError::ConfigInvalid(format!(
            "sweep file {} is empty",
            a.sweep.display()
        )));
    }
    let file: SweepFile = toml::from_str(&text)
        .map_err(|e| OtterError::ConfigInvalid(format!("{}: {e}", a.sweep.display())))?;
    let points = expand_sweep(&file)?;
    rec.input(&a.sweep)?;
    create_dir(&a.out)?;

    let base_dir = a.sweep.parent().unwrap_or(Path::new("."));
    let (train, test) = match &file.data {
        Some(p) => {
            let p = base_dir.join(p);
            rec.input(&p)?;
            let train = load_embeddings(&p)?;
            let test = match &file.eval_data {
                Some(e) => {
                    let e = base_dir.join(e);
                    rec.input(&e)?;
                    load_embeddings(&e)?
                }
                None => train.clone(),
            };
            (train, test)
        }
        None => {
            let synth = file.synth.clone().unwrap_or(SweepSynth {
                config: SynthConfig::default(),
                holdout_per_concept: default_holdout(),
            });
            rec.synth_config = Some(json_value(&synth)?);
            generate_with_holdout(&synth.config, synth.holdout_per_concept)?
        }
    };
    let seeds = if file.seeds.is_empty() {
        vec![0]
    } else {
        file.seeds.clone()
    };
    rec.seeds = seeds.clone();
    info!("sweep: {} configs × {} seeds", points.len(), seeds.len());

    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let run_one = |&(p, seed): &(usize, u64)| {
        let mut cfg = points[p].config.clone();
        cfg.seed = seed;
        let outcome = train_shuffled(&cfg, &train.pairs)
            .and_then(|o| {
                let fh = zero_shot_report(&o.student, &test, &[1], "")?.flat_hit_at[&1];
                Ok((fh, o.log.last_loss().unwrap_or(f64::NAN)))
            })
            .map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            warn!("run {:?} seed {seed} failed: {e}", points[p].overrides);
        }
        SweepResult {
            point: p,
            seed,
            outcome,
        }
    };
    let results: Vec<SweepResult> = match a.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| OtterError::Io(e.to_string()))?
            .install(|| jobs.par_iter().map(run_one).collect()),
        None => jobs.par_iter().map(run_one).collect(),
    };

    let keys: BTreeSet<&String> = points.iter().flat_map(|p| p.overrides.keys()).collect();
    let runs_path = a.out.join("sweep_runs.csv");
    let mut w = csv_writer(&runs_path)?;
    let mut header: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    header.extend(["seed", "status", "fh_at_1", "final_loss", "error"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    let key_cells = |p: &SweepPoint| -> Vec<String> {
        keys.iter()
            .map(|k| p.overrides.get(*k).cloned().unwrap_or_default())
            .collect()
    };
    for r in &results {
        let mut row = key_cells(&points[r.point]);
        row.push(r.seed.to_string());
        match &r.outcome {
            Ok((fh, loss)) => {
                row.extend(["ok".into(), fh.to_string(), loss.to_string(), String::new()])
            }
            Err(e) => row.extend(["failed".into(), String::new(), String::new(), e.clone()]),
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;

    let table_path = a.out.join("sweep.csv");
    let mut w = csv_writer(&table_path)?;
    let mut header: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    header.extend(["n_seeds", "n_failed", "fh_at_1_mean", "final_loss_mean"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (i, p) in points.iter().enumerate() {
        let ok: Vec<(f64, f64)> = results
            .iter()
            .filter(|r| r.point == i)
            .filter_map(|r| r.outcome.as_ref().ok().copied())
            .collect();
        let mean = |f: fn(&(f64, f64)) -> f64| {
            if ok.is_empty() {
                String::new()
            } else {
                (crate::numerics::fsum(ok.iter().map(f)) / ok.len() as f64).to_string()
            }
        };
        let mut row = key_cells(p);
        row.extend([
            seeds.len().to_string(),
            (seeds.len() - ok.len()).to_string(),
            mean(|r| r.0),
            mean(|r| r.1),
        ]);
        info!("{:?}: FH@1 {}", p.overrides, row[row.len() - 2]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    rec.artifacts.extend([table_path, runs_path]);
    rec.finish(&a.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub manifest: RunManifest,
    pub matched: Vec<String>,
    pub mismatched: Vec<String>,
}

/// Re-executes the command recorded in `manifest_file`, writing to `out`, and
/// compares every recorded artifact checksum with the new one.
pub fn replay(manifest_file: &Path, out: &Path) -> Result<ReplayOutcome> {
    let recorded = RunManifest::load(manifest_file)?;
    if recorded.command == "replay" {
        return Err(OtterError::ConfigInvalid("cannot replay a replay".into()));
    }
    let new_out = std::path::absolute(out)?;
    if new_out.to_string_lossy() == recorded.output {
        return Err(OtterError::ConfigInvalid(
            "replay output must differ from the recorded output".into(),
        ));
    }
    for (path, sum) in &recorded.inputs {
        let now = sha256_file(Path::new(path))?;
        if &now != sum {
            return Err(OtterError::ConfigInvalid(format!(
                "input {path} changed since the recorded run"
            )));
        }
    }
    let args = replace_out(&recorded.args, &new_out);
    let mut argv = vec!["otter".to_string()];
    argv.extend(args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| OtterError::ConfigInvalid(e.to_string()))?;
    execute(&cli.command, &args)?;

    let fresh = RunManifest::load(&manifest_path(&recorded.command, &new_out))?;
    let mut matched = Vec::new();
    let mut mismatched = Vec::new();
    for (name, sum) in &recorded.artifacts {
        // Artifacts written outside the output (e.g. a held-out file) are
        // keyed by file name.
        match fresh.artifacts.get(name) {
            Some(s) if s == sum => matched.push(name.clone()),
            _ => mismatched.push(name.clone()),
        }
    }
    Ok(ReplayOutcome {
        manifest: fresh,
        matched,
        mismatched,
    })
}
