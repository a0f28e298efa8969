//! `clmrkit`: synthesize a corpus, preview augmentations, pre-train,
//! probe, evaluate and export filter spectra.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_config, ConfigError, Override};

#[derive(Parser, Debug)]
#[command(name = "clmrkit", version, about = "Contrastive learning of musical representations")]
struct Cli {
    /// TOML run config; environment and flags override it.
    #[arg(long, global = true, env = "CLMRKIT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "CLMRKIT_SEED")]
    seed: Option<u64>,
    /// Build batches serially on the training thread.
    #[arg(long, global = true, env = "CLMRKIT_DETERMINISTIC", num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "CLMRKIT_WORKERS")]
    workers: Option<usize>,
    /// Extra config overrides as dotted `key=value`, e.g. `train.temperature=0.1`.
    #[arg(long = "set", global = true, env = "CLMRKIT_SET", value_delimiter = ';')]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic tagged corpus (WAVs plus manifest.csv).
    Synth(SynthArgs),
    /// Augment one WAV into two views for listening.
    Augment(AugmentArgs),
    /// Contrastive pre-training on the manifest's training split.
    Pretrain(PretrainArgs),
    /// Train one probe on frozen representations and save it.
    Probe(ProbeArgs),
    /// Full probe protocol averaged over seeds; writes report.json.
    Evaluate(EvaluateArgs),
    /// Frequency spectra of one conv layer's filters as CSV.
    Filters(FiltersArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, env = "CLMRKIT_SONGS", default_value_t = 40)]
    pub songs: usize,
    #[arg(long, env = "CLMRKIT_CLASSES", default_value_t = 4)]
    pub classes: usize,
    /// Seconds per song.
    #[arg(long, env = "CLMRKIT_DURATION", default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, env = "CLMRKIT_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long, env = "CLMRKIT_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "CLMRKIT_ASYMMETRIC", num_args = 0..=1, default_missing_value = "true")]
    pub asymmetric: Option<bool>,
    #[arg(long, env = "CLMRKIT_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Manifest CSV.
    #[arg(long, env = "CLMRKIT_DATASET")]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "CLMRKIT_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "CLMRKIT_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Augment only one view of each pair.
    #[arg(long, env = "CLMRKIT_ASYMMETRIC", num_args = 0..=1, default_missing_value = "true")]
    pub asymmetric: Option<bool>,
    #[arg(long, env = "CLMRKIT_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EncoderSource {
    /// Checkpoint pre-trained on this corpus.
    #[arg(long, env = "CLMRKIT_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint pre-trained on a different corpus.
    #[arg(long, env = "CLMRKIT_TRANSFER_CHECKPOINT")]
    pub transfer_checkpoint: Option<PathBuf>,
    /// Use a randomly initialized encoder (baseline).
    #[arg(long, env = "CLMRKIT_RANDOM_ENCODER")]
    pub random_encoder: bool,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long, env = "CLMRKIT_DATASET")]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub source: EncoderSource,
    /// Fraction of labeled training songs.
    #[arg(long, env = "CLMRKIT_FRACTION")]
    pub fraction: Option<f64>,
    /// Tag vocabulary size.
    #[arg(long, env = "CLMRKIT_TOP_K")]
    pub top_k: Option<usize>,
    #[arg(long, env = "CLMRKIT_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Also write clip-level embeddings.csv.
    #[arg(long, env = "CLMRKIT_EMBEDDINGS")]
    pub embeddings: bool,
}

#[derive(Args, Debug)]
pub struct FiltersArgs {
    #[arg(long, env = "CLMRKIT_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Conv layer, counting the strided input conv as 1.
    #[arg(long, env = "CLMRKIT_LAYER", default_value_t = 1)]
    pub layer: usize,
    /// Output CSV file.
    #[arg(long, env = "CLMRKIT_OUT")]
    pub out: PathBuf,
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.into()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn overrides(cli: &Cli) -> Result<Vec<Override>, ConfigError> {
    let mut o = Vec::new();
    if let Some(s) = cli.seed {
        o.push(Override::new("seed", s as i64));
    }
    if let Some(d) = cli.deterministic {
        o.push(Override::new("deterministic", d));
    }
    if let Some(w) = cli.workers {
        o.push(Override::new("workers", w as i64));
    }
    let mut dataset = None;
    let mut probe = None;
    match &cli.command {
        Command::Pretrain(a) => {
            dataset = a.dataset.as_ref();
            if let Some(e) = a.epochs {
                o.push(Override::new("train.epochs", e as i64));
            }
            if let Some(b) = a.batch_size {
                o.push(Override::new("train.batch_size", b as i64));
            }
            if let Some(x) = a.asymmetric {
                o.push(Override::new("train.asymmetric", x));
            }
        }
        Command::Augment(a) => {
            if let Some(x) = a.asymmetric {
                o.push(Override::new("train.asymmetric", x));
            }
        }
        Command::Probe(a) => probe = Some(a),
        Command::Evaluate(a) => probe = Some(&a.probe),
        Command::Synth(_) | Command::Filters(_) => {}
    }
    if let Some(a) = probe {
        dataset = a.dataset.as_ref();
        if let Some(f) = a.fraction {
            o.push(Override::new("probe.fraction", f));
        }
        if let Some(k) = a.top_k {
            o.push(Override::new("dataset.top_k", k as i64));
        }
    }
    if let Some(d) = dataset {
        o.push(Override::new("dataset.manifest", d.to_string_lossy().to_string()));
    }
    for s in &cli.set {
        o.push(Override::parse(s)?);
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(cli.config.as_deref(), &overrides(&cli)?)?;
    if config.workers > 0 {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build_global();
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(&config, a),
        Command::Augment(a) => commands::augment(&config, a),
        Command::Pretrain(a) => commands::pretrain(&config, a),
        Command::Probe(a) => commands::probe(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::Filters(a) => commands::filters(&config, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
