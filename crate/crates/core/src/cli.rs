//! Command-line front end: `gen-data`, `train`, `evaluate`, `rank`, `bench`.
//!
//! Every command that writes files also writes a run manifest next to its
//! output recording the resolved configuration, input and output hashes and
//! timestamps.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{generate_synthetic, load_jsonl, write_jsonl, Dataset, SyntheticSpec};
use crate::config::TrainConfig;
use crate::distill;
use crate::error::{Error, Result};
use crate::eval::{evaluate, fused_rank, latency_bench, RankedList, RequestError};
use crate::parallel::resolve_threads;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "divrank", version, about = "Diversity-aware ranking with a distilled MMR teacher")]
pub struct Cli {
    /// Worker threads for evaluation and teacher labeling.
    #[arg(long, global = true, env = "DIVRANK_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic request file.
    GenData(GenDataArgs),
    /// Train the backbone and the distilled student.
    Train(TrainArgs),
    /// Accuracy and diversity metrics of fused rankings.
    Evaluate(EvaluateArgs),
    /// Fused Top-K lists for every request of a file.
    Rank(RankArgs),
    /// Teacher-versus-student latency benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2400)]
    pub requests: usize,
    /// Candidates per request.
    #[arg(long, default_value_t = 200)]
    pub candidates: usize,
    #[arg(long, default_value_t = 80)]
    pub categories: usize,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 8000)]
    pub catalog_size: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub cluster_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub show_fraction: f64,
    #[arg(long, default_value_t = 8.0)]
    pub preference_concentration: f64,
    #[arg(long, default_value_t = 0.4)]
    pub preferred_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub category_skew: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

impl GenDataArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            num_users: self.users,
            num_requests: self.requests,
            catalog_size: self.catalog_size,
            num_categories: self.categories,
            candidates_per_request: self.candidates,
            latent_dim: self.latent_dim,
            cluster_noise: self.cluster_noise,
            show_fraction: self.show_fraction,
            preference_concentration: self.preference_concentration,
            preferred_fraction: self.preferred_fraction,
            category_skew: self.category_skew,
        }
    }
}

/// One optional flag per `TrainConfig` field.
#[derive(Debug, Default, Args)]
pub struct ConfigFlags {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, num_args = 2, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_teacher: Option<usize>,
    #[arg(long)]
    pub teacher_fraction: Option<f64>,
    #[arg(long)]
    pub tau_start: Option<f64>,
    #[arg(long)]
    pub tau_end: Option<f64>,
    #[arg(long)]
    pub tau_decay: Option<f64>,
    #[arg(long)]
    pub infonce_t: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub warm_epochs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub targets_per_request: Option<usize>,
    #[arg(long)]
    pub context_pool: Option<usize>,
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
}

macro_rules! overlay {
    ($flags:expr, $cfg:expr, $($field:ident),*) => {
        $(if let Some(v) = $flags.$field { $cfg.$field = v; })*
    };
}

impl ConfigFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        overlay!(
            self, cfg, d, init_std, learning_rate, batch_size, lambda, gamma, beta1, beta2, k, teacher_fraction,
            tau_start, tau_end, tau_decay, infonce_t, dropout, patience, warm_epochs, epochs, seed,
            targets_per_request, context_pool, valid_fraction, max_grad_norm
        );
        if let Some(h) = &self.hidden {
            cfg.hidden = h
                .as_slice()
                .try_into()
                .map_err(|_| Error::config("hidden", format!("expected two widths, got {h:?}")))?;
        }
        if self.k_teacher.is_some() {
            cfg.k_teacher = self.k_teacher;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with any subset of the configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20")]
    pub k: Vec<usize>,
    /// Fusion weights; defaults to the model's configured value.
    #[arg(long, value_delimiter = ',')]
    pub gamma: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct RankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// sha256 of every input file, taken before the run starts.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub k: usize,
    pub gamma: f64,
    pub lists: Vec<RankedList>,
    pub errors: Vec<RequestError>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            for entry in sorted_files(p)? {
                out.insert(entry.display().to_string(), sha256_file(&entry)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() {
        fs::read_dir(path).map_err(|e| Error::io(path, e))?.next().is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(RUN_MANIFEST);
    PathBuf::from(s)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

struct Run {
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, args: &[String], config: serde_json::Value, seed: u64, inputs: &[&Path]) -> Result<Self> {
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                args: args.to_vec(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config,
                seed,
                inputs: hash_inputs(inputs)?,
                outputs: BTreeMap::new(),
                started_at: now(),
                finished_at: String::new(),
            },
        })
    }

    fn finish(mut self, outputs: &[&Path], manifest_path: &Path) -> Result<RunManifest> {
        self.manifest.outputs = hash_inputs(outputs)?;
        self.manifest.finished_at = now();
        write_atomic(manifest_path, &serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

/// Writes a JSON report to `out` (plus its manifest) or returns it for stdout.
fn emit<T: Serialize>(report: &T, out: Option<&Path>, force: bool, run: Run) -> Result<String> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => {
            refuse_existing(path, force)?;
            write_atomic(path, text.as_bytes())?;
            let m = run.finish(&[path], &sidecar(path))?;
            Ok(serde_json::to_string_pretty(&m)?)
        }
        None => Ok(text),
    }
}

/// Resolved training configuration: defaults, then the file, then flags.
pub fn resolve_config(file: Option<&Path>, flags: &ConfigFlags) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    flags.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_for(model: &crate::Model, path: &Path) -> Result<Dataset> {
    load_jsonl(path)?.reindex(model.vocab.clone())
}

/// Runs one parsed command and returns what it prints on stdout.
pub fn run(cli: Cli, raw_args: &[String]) -> Result<String> {
    let threads = resolve_threads(cli.threads);
    match cli.command {
        Command::GenData(a) => {
            refuse_existing(&a.out, a.force)?;
            let spec = a.spec();
            let run = Run::start("gen-data", raw_args, serde_json::to_value(&spec)?, spec.seed, &[])?;
            let data = generate_synthetic(&spec)?;
            write_jsonl(&data, &a.out)?;
            let m = run.finish(&[&a.out], &sidecar(&a.out))?;
            Ok(serde_json::to_string_pretty(&m)?)
        }
        Command::Train(a) => {
            let config = resolve_config(a.config.as_deref(), &a.flags)?;
            refuse_existing(&a.out, a.force)?;
            let mut inputs: Vec<&Path> = vec![&a.data];
            if let Some(c) = &a.config {
                inputs.push(c);
            }
            let run = Run::start("train", raw_args, serde_json::to_value(&config)?, config.seed, &inputs)?;
            let data = load_jsonl(&a.data)?;
            let (model, history) = distill::train(&data, &config, threads)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let stale = a.out.join(RUN_MANIFEST);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
            distill::save(&model, &a.out)?;
            distill::save_history(&history, &a.out)?;
            let m = run.finish(&[&a.out], &a.out.join(RUN_MANIFEST))?;
            Ok(serde_json::to_string_pretty(&m)?)
        }
        Command::Evaluate(a) => {
            let run_inputs: [&Path; 2] = [&a.model, &a.data];
            let model = distill::load(&a.model)?;
            let gammas = if a.gamma.is_empty() { vec![model.config.gamma] } else { a.gamma.clone() };
            let run = Run::start("evaluate", raw_args, serde_json::to_value(&model.config)?, model.config.seed, &run_inputs)?;
            let data = load_for(&model, &a.data)?;
            let reports = evaluate(&model, &data, &a.k, &gammas, threads)?;
            emit(&reports, a.out.as_deref(), a.force, run)
        }
        Command::Rank(a) => {
            let run_inputs: [&Path; 2] = [&a.model, &a.data];
            let model = distill::load(&a.model)?;
            let gamma = a.gamma.unwrap_or(model.config.gamma);
            let run = Run::start("rank", raw_args, serde_json::to_value(&model.config)?, model.config.seed, &run_inputs)?;
            let data = load_for(&model, &a.data)?;
            let mut lists = Vec::new();
            let mut errors = Vec::new();
            for r in &data.requests {
                match fused_rank(r, &model, gamma, a.k) {
                    Ok(l) => lists.push(l),
                    Err(e) => errors.push(RequestError { request_id: r.request_id.clone(), error: e.to_string() }),
                }
            }
            emit(&RankReport { k: a.k, gamma, lists, errors }, a.out.as_deref(), a.force, run)
        }
        Command::Bench(a) => {
            let model = distill::load(&a.model)?;
            let run = Run::start("bench", raw_args, serde_json::to_value(&model.config)?, model.config.seed, &[&a.model])?;
            let report = latency_bench(&model, a.n, a.topk, a.repeat)?;
            emit(&report, a.out.as_deref(), a.force, run)
        }
    }
}

/// Machine-readable error object written to stderr on failure.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub error: String,
    pub message: String,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout(), "{e}");
            return 0;
        }
        Err(e) => {
            let report = ErrorReport { error: "usage".into(), message: e.to_string().trim_end().to_string() };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            return 2;
        }
    };
    match run(cli, &raw) {
        Ok(out) => {
            // a closed pipe (e.g. `| head`) is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{out}");
            0
        }
        Err(e) => {
            let report = ErrorReport { error: e.kind().into(), message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            1
        }
    }
}
