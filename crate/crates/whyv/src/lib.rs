//! Target-speaker extraction with globally conditioned time-frequency
//! gating.
//!
//! The pipeline: a mixture waveform is moved to the STFT domain, embedded
//! into a (D, T, F) feature map, refined by a stack of dual-path blocks
//! (bidirectional recurrences across frequency and time plus frame
//! attention), and gated per block by a speaker-conditioned global filter
//! and bias generated once from the fused reference/environment embedding.
//! The result is decoded back to a complex spectrogram and inverted to a
//! waveform. Everything — training included — runs on the crate's own f64
//! autodiff engine, so the whole system is testable at desk scale.
//!
//! See the `examples/` directory for one runnable program per capability
//! and the `whyv` binary for the end-to-end command-line pipeline.

use thiserror::Error;

pub mod cli;
pub mod dsp;
pub mod encoder;
pub mod gate;
pub mod gridnet;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

/// Crate-wide error type; module-level errors fold into it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("clip too short: {got_s:.3} s, need at least {need_s:.3} s")]
    TooShort { got_s: f64, need_s: f64 },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("zero-power signal cannot be scaled to an SNR")]
    ZeroPower,
    #[error("length mismatch: {a} vs {b} samples")]
    LengthMismatch { a: usize, b: usize },
    #[error("bad speaker profile: {0}")]
    BadProfile(String),
    #[error("too few speakers: have {have}, need at least {need}")]
    TooFewSpeakers { have: usize, need: usize },
    #[error("sample-rate mismatch: expected {expected} Hz, got {got} Hz")]
    RateMismatch { expected: u32, got: u32 },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("training produced a non-finite value at step {step}")]
    TrainingDiverged { step: u64 },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;
