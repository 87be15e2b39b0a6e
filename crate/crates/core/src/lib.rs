//! Streaming transformer-CTC recognizer with two-stage candidate rescoring.
//!
//! The crate is organized bottom-up:
//!
//! * [`kernel`]: dense tensors, a reverse-mode tape, and the `Engine`
//!   abstraction that lets the same model code run in plain evaluation or
//!   under gradient recording.
//! * [`model`]: parameter containers and configuration for the full network.
//! * [`encoder`]: convolutional downsampling plus windowed self-attention
//!   blocks and the lookahead context layer, with an incremental streaming
//!   session that matches offline encoding bit for bit.
//! * [`ctc`]: CTC loss, collapse rules, greedy and prefix beam search, and a
//!   per-prefix lattice scorer used by joint label-synchronous decoding.
//! * [`decoder`]: attention decoder used as a one-step candidate scorer and
//!   as an incremental decoder for joint search.
//! * [`pipeline`]: end-to-end recognition modes and the streaming session.
//! * [`training`]: joint loss, Adam with warmup, checkpoint averaging.
//! * [`corpus`]: vocabularies, metrics, file formats, synthetic data.

pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod kernel;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
