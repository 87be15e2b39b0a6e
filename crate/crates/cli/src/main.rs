//! `oah` — drive the streaming recognizer end to end: synthesize corpora,
//! train models, decode with any mode, and sweep ablation axes.
//!
//! Exit codes: 0 success, 2 usage/configuration errors, 3 data errors
//! (missing or malformed files, dimension mismatches), 4 numeric failures.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use oah_core::pipeline::Mode;

/// One error type per exit-code class.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric: {m}"),
        }
    }
}

impl From<oah_core::Error> for CliError {
    fn from(e: oah_core::Error) -> Self {
        match e {
            oah_core::Error::Config(m) => CliError::Usage(format!("invalid config: {m}")),
            oah_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "oah",
    version,
    about = "Streaming recognizer toolkit: synthesize, train, decode, ablate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (vocabulary, features, transcripts)
    Synth(Box<Flags>),
    /// Train or resume a model; writes checkpoint.oahc + metrics.csv
    Train(Box<Flags>),
    /// Decode a split with a checkpoint; writes nbest.jsonl + summary.csv
    Decode(Box<Flags>),
    /// Sweep one axis (beam | epsilon | alpha) into a CSV table
    Ablate(Box<Flags>),
}

/// Every knob as an optional override; unset flags keep the config-file or
/// default value. The resolved set is echoed to `<out-dir>/run.config`.
#[derive(Args)]
struct Flags {
    /// key=value config file applied before flag overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory run outputs are written to
    #[arg(long)]
    out_dir: Option<String>,
    /// Directory holding vocab.txt, feats/, and split .tsv files
    #[arg(long)]
    data_dir: Option<String>,
    /// Root seed; all randomness derives from it via named streams
    #[arg(long)]
    seed: Option<u64>,

    // Corpus synthesis.
    /// Task family: toy (ambiguous pairs) | plain (fillers only)
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    feat_dim: Option<usize>,
    /// Feature noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,

    // Model shape.
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    conv_channels: Option<usize>,
    #[arg(long)]
    enc_blocks: Option<usize>,
    #[arg(long)]
    dec_blocks: Option<usize>,
    /// Encoder self-attention left-context rows
    #[arg(long)]
    tau: Option<usize>,
    /// Encoder future-context rows (one row = 4 raw frames)
    #[arg(long)]
    epsilon: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Must match the vocabulary file when set; 0 derives from it
    #[arg(long)]
    vocab_size: Option<usize>,

    // Training.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Alignment-loss weight in [0,1]; 1-alpha goes to cross-entropy
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Per-utterance probability of masking a time and feature band
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    mask_max_frames: Option<usize>,
    #[arg(long)]
    mask_max_dims: Option<usize>,
    /// Epoch mean loss above this rolls back and stops training
    #[arg(long)]
    diverge_loss: Option<f64>,
    /// Beam width for per-epoch dev decodes
    #[arg(long)]
    dev_beam: Option<usize>,
    /// Checkpoint to continue training from
    #[arg(long)]
    resume: Option<String>,
    /// Store optimizer state in the checkpoint (true/false)
    #[arg(long)]
    save_adam: Option<bool>,

    // Decoding.
    /// Decoding strategy: ops | oah | ns
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    /// First-pass weight of the interpolated (ns) search, in [0,1]
    #[arg(long)]
    interp_lambda: Option<f64>,
    /// Add the end-of-sequence step to candidate scores
    #[arg(long)]
    score_eos: bool,
    /// Replay frames through the incremental session instead of offline
    #[arg(long)]
    streaming: bool,
    /// Raw frames per streaming push
    #[arg(long)]
    chunk_frames: Option<usize>,
    /// Decode sequentially and report the real-time factor
    #[arg(long)]
    rtf: bool,
    /// Worker threads for decoding (0 = one per core); ignored with --rtf
    #[arg(long)]
    threads: Option<usize>,
    /// Split name to decode (train|dev|test)
    #[arg(long)]
    split: Option<String>,
    /// Trained checkpoint to decode with (or the beam-axis ablation input)
    #[arg(long)]
    checkpoint: Option<String>,

    // Ablation.
    /// Sweep axis: beam | epsilon | alpha
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values (defaults per axis)
    #[arg(long)]
    values: Option<String>,
    /// Train any missing per-point checkpoints instead of erroring
    #[arg(long)]
    train_missing: bool,
}

impl Flags {
    /// Defaults <- config file <- flags.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            rc.load_file(path)?;
        }
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { rc.$field = v.clone(); })*
            };
        }
        set!(
            out_dir, data_dir, seed, task, feat_dim, noise, train_size, dev_size, test_size,
            d_model, heads, ffn_hidden, conv_channels, enc_blocks, dec_blocks, tau, epsilon,
            label_smoothing, vocab_size, epochs, batch_size, alpha, lr_scale, warmup_steps,
            mask_prob, mask_max_frames, mask_max_dims, diverge_loss, dev_beam, resume, save_adam,
            beam, interp_lambda, chunk_frames, threads, split, checkpoint, axis, values,
        );
        if let Some(m) = &self.mode {
            rc.mode = Mode::parse(m)
                .ok_or_else(|| CliError::Usage(format!("--mode expects ops|oah|ns, got {m:?}")))?;
        }
        if self.score_eos {
            rc.score_eos = true;
        }
        if self.streaming {
            rc.streaming = true;
        }
        if self.rtf {
            rc.rtf = true;
        }
        if self.train_missing {
            rc.train_missing = true;
        }
        Ok(rc)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Synth(f) => commands::synth(&f.resolve()?),
        Cmd::Train(f) => commands::train(&f.resolve()?),
        Cmd::Decode(f) => commands::decode(&f.resolve()?),
        Cmd::Ablate(f) => commands::ablate(&f.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
