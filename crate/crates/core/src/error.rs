use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("frame directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("no frame files in {0}")]
    NoFrames(PathBuf),
    #[error("inconsistent frame dimensions: {path} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    InconsistentDimensions {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("unreadable frame file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("cannot write to {path}: {reason}")]
    UnwritablePath { path: PathBuf, reason: String },
    #[error("frame list is empty")]
    EmptyFrameList,
    #[error("frame values outside [-1, 1]")]
    ValuesOutOfRange,
    #[error("video of {total} frames is shorter than clip length {clip_length}")]
    TotalTooShort { total: usize, clip_length: usize },
    #[error("clip length must be at least 2, got {0}")]
    ClipLengthTooShort(usize),
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("unsupported version {got} in {path} (supported {supported})")]
    Version {
        path: PathBuf,
        got: u32,
        supported: u32,
    },
    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("spatial dims {h}x{w} not divisible by reduction factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("decode requires sigma = 0, got {0}")]
    NonZeroSigma(f64),
    #[error("clip values outside [-1, 1]")]
    ValuesOutOfRange,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown adapter target {layer_id}.{projection}")]
    UnknownAdapterTarget { layer_id: String, projection: String },
    #[error("sigma {0} outside schedule range")]
    SigmaOutOfRange(f64),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum EdmError {
    #[error("invalid schedule bounds: need 0 < sigma_min < sigma_max, got {min} / {max}")]
    InvalidBounds { min: f64, max: f64 },
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("latent sigma {got} does not match required {want}")]
    SigmaMismatch { got: f64, want: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum SarpError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("samples contain non-finite values")]
    NonFinite,
    #[error("zero-variance sample")]
    ZeroVariance,
    #[error("mask shape {got:?} does not match clip shape {want:?}")]
    MaskShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Edm(#[from] EdmError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("adapter shape mismatch: W0 is {d}x{k}, B is {bd}x{br}, A is {ar}x{ak}")]
    ShapeMismatch {
        d: usize,
        k: usize,
        bd: usize,
        br: usize,
        ar: usize,
        ak: usize,
    },
    #[error("unknown adapter target {layer_id}.{projection}")]
    UnknownTarget { layer_id: String, projection: String },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum SkipError {
    #[error("cached K/V dims {cached:?} incompatible with current {current:?}")]
    DimMismatch {
        cached: Vec<usize>,
        current: Vec<usize>,
    },
    #[error("cache built for {cache_steps} steps, run uses {run_steps}")]
    StepCountMismatch { cache_steps: usize, run_steps: usize },
    #[error("cache incomplete: missing entry for step {step}, site {layer_id}")]
    Incomplete { step: usize, layer_id: String },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("attention map shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("source trace has {trace_steps} steps but run schedule has {run_steps}")]
    TraceMisaligned { trace_steps: usize, run_steps: usize },
    #[error("source trace missing entry for step {step}, site {layer_id}")]
    TraceIncomplete { step: usize, layer_id: String },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("no foreground detected in frame {0}")]
    NoForeground(usize),
    #[error("track length {track} does not match frame count {frames}")]
    TrackLengthMismatch { track: usize, frames: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{what} training diverged at step {step}: loss not finite")]
    Diverged { what: &'static str, step: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Edm(#[from] EdmError),
    #[error(transparent)]
    Sarp(#[from] SarpError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Skip(#[from] SkipError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("edited first frame is {got_w}x{got_h} but source frames are {want_w}x{want_h}")]
    EditFrameDimensions {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("missing adapters for clip {0}")]
    MissingAdapters(usize),
}
