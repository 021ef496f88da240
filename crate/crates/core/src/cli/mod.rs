//! Command-line toolchain: synth → pretrain → extract → pca → train-asr → eval.
//!
//! Exit codes: 0 success, 2 arguments or configuration, 3 I/O, 4 contract or
//! training failures.

mod commands;
pub mod config;
pub mod formats;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;

pub use commands::Representation;
pub use config::RunConfig;

pub const EXIT_ARGS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "contraspeech", version, about = "Contrastive speech representations and a CTC recognizer")]
pub struct Cli {
    /// Omit timestamps from logs.
    #[arg(long, global = true)]
    pub no_timestamps: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Pretrain a representation model.
    Pretrain(PretrainArgs),
    /// Write per-utterance representations and an index.
    Extract(ExtractArgs),
    /// Fit PCA on extracted features and export the explained-variance curve.
    Pca(PcaArgs),
    /// Train the CTC recognizer.
    TrainAsr(TrainAsrArgs),
    /// Greedy-decode and score a corpus.
    Eval(EvalArgs),
    /// Print every configuration key with its value.
    PrintConfig(PrintConfigArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub utts: usize,
    /// Token inventory size (at most 8).
    #[arg(long, default_value_t = 5)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    /// Extra utterances written to heldout.tsv.
    #[arg(long, default_value_t = 0)]
    pub heldout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Cpc,
    Masked,
}

#[derive(clap::Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Objective::Cpc)]
    pub objective: Objective,
    /// Add a backward context network (cpc only).
    #[arg(long)]
    pub bidirectional: bool,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(skip)]
    pub no_timestamps: bool,
}

#[derive(clap::Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for feature files and index.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub whiten: bool,
    /// Mean normalization only (identity rotation).
    #[arg(long)]
    pub mean_only: bool,
    /// Curve output; defaults to `<out>.curve`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct TrainAsrArgs {
    /// Feature index from `extract`.
    #[arg(long, conflicts_with = "logmel", required_unless_present = "logmel")]
    pub index: Option<PathBuf>,
    /// Compute 80-dim log mel features from the manifest audio.
    #[arg(long)]
    pub logmel: bool,
    /// Transcripts (and audio for --logmel).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pca_model: Option<PathBuf>,
    /// Overrides asr.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides the feature rate recorded in the index (Hz).
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(skip)]
    pub no_timestamps: bool,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "logmel", required_unless_present = "logmel")]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub logmel: bool,
    /// References (and audio for --logmel).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct PrintConfigArgs {
    /// Show this file's values instead of the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_ARGS,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_CONTRACT,
    }
}

fn init_logging(timestamps: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    if !timestamps {
        builder.format_timestamp(None);
    }
    let _ = builder.try_init();
}

pub fn execute(cli: Cli) -> Result<String, Error> {
    let ts = cli.no_timestamps;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain_cmd(&PretrainArgs { no_timestamps: ts, ..a }),
        Command::Extract(a) => commands::extract(&a),
        Command::Pca(a) => commands::pca(&a),
        Command::TrainAsr(a) => commands::train_asr_cmd(&TrainAsrArgs { no_timestamps: ts, ..a }),
        Command::Eval(a) => commands::eval(&a),
        Command::PrintConfig(a) => match a.config {
            Some(p) => RunConfig::load(&p).map(|c| c.render()),
            None => Ok(RunConfig::default().render()),
        },
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ARGS } else { 0 };
        }
    };
    init_logging(!cli.no_timestamps);
    match execute(cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
