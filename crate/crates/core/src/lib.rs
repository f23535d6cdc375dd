//! First-frame-guided video editing engine over a compact trainable
//! temporal denoiser: deterministic noise-schedule sampling and inversion,
//! smooth-area random perturbation, per-clip motion adapters, skip-interval
//! key/value reuse, and attention matching.

pub mod artifact;
pub mod attn_match;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod edm;
pub mod error;
pub mod kernels_ext;
pub mod lora;
pub mod media;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod sarp;
pub mod skip;
pub mod synth;
pub mod train;
