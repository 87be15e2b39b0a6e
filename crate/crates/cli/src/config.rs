//! Flat key=value run configuration shared by every subcommand.
//!
//! Resolution order: built-in defaults, then the `--config FILE` key=value
//! file, then explicit command-line flags. Every run echoes the fully
//! resolved result to `<out-dir>/run.config`; feeding that file back via
//! `--config` reproduces the run (wall-clock timing fields aside).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use oah_core::model::ModelConfig;
use oah_core::pipeline::Mode;
use oah_core::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    // Corpus synthesis.
    pub task: String,
    pub feat_dim: usize,
    pub noise: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    // Model shape.
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub conv_channels: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub tau: usize,
    pub epsilon: usize,
    pub label_smoothing: f64,
    /// 0 means "use the vocabulary file's size"; any other value must
    /// match it.
    pub vocab_size: usize,
    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub mask_prob: f64,
    pub mask_max_frames: usize,
    pub mask_max_dims: usize,
    pub diverge_loss: f64,
    pub dev_beam: usize,
    pub resume: String,
    pub save_adam: bool,
    // Decoding.
    pub mode: Mode,
    pub beam: usize,
    pub interp_lambda: f64,
    pub score_eos: bool,
    pub streaming: bool,
    pub chunk_frames: usize,
    pub rtf: bool,
    /// 0 means "one worker per available core".
    pub threads: usize,
    pub split: String,
    pub checkpoint: String,
    // Ablation.
    pub axis: String,
    /// Comma-separated axis values; empty selects the per-axis default.
    pub values: String,
    pub train_missing: bool,
    // Shared.
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "toy".into(),
            feat_dim: 8,
            noise: 0.05,
            train_size: 2000,
            dev_size: 200,
            test_size: 600,
            d_model: 24,
            heads: 2,
            ffn_hidden: 32,
            conv_channels: 12,
            enc_blocks: 2,
            dec_blocks: 1,
            tau: 2,
            epsilon: 1,
            label_smoothing: 0.1,
            vocab_size: 0,
            epochs: 30,
            batch_size: 16,
            alpha: 0.1,
            lr_scale: 2.0,
            warmup_steps: 200,
            mask_prob: 0.0,
            mask_max_frames: 6,
            mask_max_dims: 2,
            diverge_loss: f64::INFINITY,
            dev_beam: 4,
            resume: String::new(),
            save_adam: true,
            mode: Mode::Oah,
            beam: 8,
            interp_lambda: 0.3,
            score_eos: false,
            streaming: false,
            chunk_frames: 16,
            rtf: false,
            threads: 0,
            split: "test".into(),
            checkpoint: String::new(),
            axis: "beam".into(),
            values: String::new(),
            train_missing: false,
            seed: 0,
            data_dir: String::new(),
            out_dir: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse value {value:?}")))
}

impl RunConfig {
    /// Set one field by its config-file key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "task" => self.task = value.to_string(),
            "feat_dim" => self.feat_dim = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "dev_size" => self.dev_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "enc_blocks" => self.enc_blocks = parse(key, value)?,
            "dec_blocks" => self.dec_blocks = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "mask_prob" => self.mask_prob = parse(key, value)?,
            "mask_max_frames" => self.mask_max_frames = parse(key, value)?,
            "mask_max_dims" => self.mask_max_dims = parse(key, value)?,
            "diverge_loss" => self.diverge_loss = parse(key, value)?,
            "dev_beam" => self.dev_beam = parse(key, value)?,
            "resume" => self.resume = value.to_string(),
            "save_adam" => self.save_adam = parse(key, value)?,
            "mode" => {
                self.mode = Mode::parse(value).ok_or_else(|| {
                    CliError::Usage(format!("config key mode: expected ops|oah|ns, got {value:?}"))
                })?
            }
            "beam" => self.beam = parse(key, value)?,
            "interp_lambda" => self.interp_lambda = parse(key, value)?,
            "score_eos" => self.score_eos = parse(key, value)?,
            "streaming" => self.streaming = parse(key, value)?,
            "chunk_frames" => self.chunk_frames = parse(key, value)?,
            "rtf" => self.rtf = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "split" => self.split = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            "axis" => self.axis = value.to_string(),
            "values" => self.values = value.to_string(),
            "train_missing" => self.train_missing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a key=value file. `#` starts a comment; blank lines are
    /// skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config file {} line {}: expected key = value",
                    path.display(),
                    i + 1
                )));
            };
            self.apply(k.trim(), v)?;
        }
        Ok(())
    }

    /// The full resolved configuration as a key=value document.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("task", self.task.clone());
        kv("feat_dim", self.feat_dim.to_string());
        kv("noise", self.noise.to_string());
        kv("train_size", self.train_size.to_string());
        kv("dev_size", self.dev_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("d_model", self.d_model.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn_hidden", self.ffn_hidden.to_string());
        kv("conv_channels", self.conv_channels.to_string());
        kv("enc_blocks", self.enc_blocks.to_string());
        kv("dec_blocks", self.dec_blocks.to_string());
        kv("tau", self.tau.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("label_smoothing", self.label_smoothing.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lr_scale", self.lr_scale.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("mask_prob", self.mask_prob.to_string());
        kv("mask_max_frames", self.mask_max_frames.to_string());
        kv("mask_max_dims", self.mask_max_dims.to_string());
        kv("diverge_loss", self.diverge_loss.to_string());
        kv("dev_beam", self.dev_beam.to_string());
        kv("resume", self.resume.clone());
        kv("save_adam", self.save_adam.to_string());
        kv("mode", self.mode.as_str().to_string());
        kv("beam", self.beam.to_string());
        kv("interp_lambda", self.interp_lambda.to_string());
        kv("score_eos", self.score_eos.to_string());
        kv("streaming", self.streaming.to_string());
        kv("chunk_frames", self.chunk_frames.to_string());
        kv("rtf", self.rtf.to_string());
        kv("threads", self.threads.to_string());
        kv("split", self.split.clone());
        kv("checkpoint", self.checkpoint.clone());
        kv("axis", self.axis.clone());
        kv("values", self.values.clone());
        kv("train_missing", self.train_missing.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.clone());
        kv("out_dir", self.out_dir.clone());
        s
    }

    /// Write the resolved config into the run's output directory.
    pub fn write_echo(&self, out_dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Data(format!("create {}: {e}", out_dir.display())))?;
        let path = out_dir.join("run.config");
        fs::write(&path, self.echo())
            .map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn model_cfg(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            feat_dim: self.feat_dim,
            d_model: self.d_model,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            conv_channels: self.conv_channels,
            enc_blocks: self.enc_blocks,
            dec_blocks: self.dec_blocks,
            tau: self.tau,
            epsilon: self.epsilon,
            vocab_size,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            alpha: self.alpha,
            lr_scale: self.lr_scale,
            warmup_steps: self.warmup_steps,
            mask_prob: self.mask_prob,
            mask_max_frames: self.mask_max_frames,
            mask_max_dims: self.mask_max_dims,
            seed: self.seed,
            diverge_loss: self.diverge_loss,
            dev_beam: self.dev_beam,
            score_eos: self.score_eos,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_through_apply() {
        let mut rc = RunConfig::default();
        rc.task = "plain".into();
        rc.noise = 0.125;
        rc.mode = Mode::Ns;
        rc.diverge_loss = f64::INFINITY;
        rc.values = "1,5,10".into();
        rc.data_dir = "corpus/dir".into();
        let echo = rc.echo();
        let mut back = RunConfig::default();
        for line in echo.lines() {
            let (k, v) = line.split_once('=').expect("echo line shape");
            back.apply(k.trim(), v).expect("echoed keys reparse");
        }
        assert_eq!(back.echo(), echo);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut rc = RunConfig::default();
        match rc.apply("bogus", "1") {
            Err(CliError::Usage(msg)) => assert!(msg.contains("bogus")),
            other => panic!("expected usage error, got {other:?}"),
        }
        match rc.apply("epochs", "three") {
            Err(CliError::Usage(msg)) => assert!(msg.contains("epochs")),
            other => panic!("expected usage error, got {other:?}"),
        }
    }
}
