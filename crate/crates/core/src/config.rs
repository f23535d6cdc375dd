//! `key = value` job configuration files.
//!
//! Recognized keys: `thr`, `beta1`, `beta2`, `downscale_cutoff`, `preset`,
//! `steps`, `seed`, `sarp.alpha`, `sarp.threshold`, `sarp.mode`,
//! `lora.rank`, `lora.steps`, `matching`. Unknown keys are rejected.
//! Lines starting with `#` and blank lines are ignored. `preset` applies
//! its stage bounds first; explicit `beta1`/`beta2` override it regardless
//! of line order.

use std::path::Path;

use crate::attn_match::{EditPreset, EditRunConfig};
use crate::error::ConfigError;
use crate::lora::MotionTrainConfig;
use crate::sarp::{PerturbMode, SarpConfig};

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub edit: EditRunConfig,
    pub sarp: SarpConfig,
    pub lora: MotionTrainConfig,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            edit: EditRunConfig::default(),
            sarp: SarpConfig::default(),
            lora: MotionTrainConfig::default(),
        }
    }
}

impl JobConfig {
    /// Propagate the root seed into every component config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.edit.seed = seed;
        self.sarp.seed = seed;
        self.lora.seed = seed;
        self
    }
}

pub fn parse_config(text: &str) -> Result<JobConfig, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Malformed { line: i + 1 });
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }

    let mut cfg = JobConfig::default();
    let invalid = |key: &str, reason: &str| ConfigError::InvalidValue {
        key: key.to_string(),
        reason: reason.to_string(),
    };
    let parse_f64 = |key: &str, v: &str| -> Result<f64, ConfigError> {
        v.parse().map_err(|_| invalid(key, "expected a number"))
    };
    let parse_usize = |key: &str, v: &str| -> Result<usize, ConfigError> {
        v.parse().map_err(|_| invalid(key, "expected an integer"))
    };

    // Preset first so explicit betas win.
    for (k, v) in &pairs {
        if k == "preset" {
            let preset =
                EditPreset::parse(v).ok_or_else(|| invalid(k, "expected local|style|shape"))?;
            let (b1, b2) = preset.betas();
            cfg.edit.preset = preset;
            cfg.edit.beta1 = b1;
            cfg.edit.beta2 = b2;
        }
    }
    for (k, v) in &pairs {
        match k.as_str() {
            "preset" => {}
            "thr" => cfg.edit.thr = parse_f64(k, v)?,
            "beta1" => cfg.edit.beta1 = parse_f64(k, v)?,
            "beta2" => cfg.edit.beta2 = parse_f64(k, v)?,
            "downscale_cutoff" => cfg.edit.downscale_cutoff = parse_usize(k, v)?,
            "steps" => cfg.edit.steps = parse_usize(k, v)?,
            "seed" => {
                let seed = v.parse().map_err(|_| invalid(k, "expected a u64"))?;
                cfg = cfg.with_seed(seed);
            }
            "matching" => {
                cfg.edit.matching_enabled = match v.as_str() {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(invalid(k, "expected on|off")),
                }
            }
            "sarp.alpha" => cfg.sarp.alpha = parse_f64(k, v)?,
            "sarp.threshold" => cfg.sarp.gradient_threshold = parse_f64(k, v)?,
            "sarp.mode" => {
                cfg.sarp.mode = PerturbMode::parse(v)
                    .ok_or_else(|| invalid(k, "expected off|smooth|non_smooth|latent"))?
            }
            "lora.rank" => cfg.lora.rank = parse_usize(k, v)?,
            "lora.steps" => cfg.lora.steps = parse_usize(k, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }

    if cfg.edit.validate().is_err() {
        return Err(ConfigError::InvalidValue {
            key: "beta1/beta2/thr".into(),
            reason: "need 0 <= beta1 <= beta2 <= 1 and thr in [0,1]".into(),
        });
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<JobConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_documented_keys() {
        let text = "\
# edit knobs
thr = 0.4
preset = style
downscale_cutoff = 2
steps = 10
seed = 99
matching = on
sarp.alpha = 0.004
sarp.threshold = 0.002
sarp.mode = non_smooth
lora.rank = 16
lora.steps = 50
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.edit.thr, 0.4);
        assert_eq!(cfg.edit.preset, EditPreset::Style);
        assert_eq!(cfg.edit.beta1, 0.8);
        assert_eq!(cfg.edit.beta2, 0.9);
        assert_eq!(cfg.edit.downscale_cutoff, 2);
        assert_eq!(cfg.edit.steps, 10);
        assert_eq!(cfg.edit.seed, 99);
        assert_eq!(cfg.sarp.seed, 99);
        assert_eq!(cfg.lora.seed, 99);
        assert_eq!(cfg.sarp.alpha, 0.004);
        assert_eq!(cfg.sarp.mode, crate::sarp::PerturbMode::NonSmooth);
        assert_eq!(cfg.lora.rank, 16);
        assert_eq!(cfg.lora.steps, 50);
    }

    #[test]
    fn explicit_betas_override_preset_regardless_of_order() {
        let cfg = parse_config("beta1 = 0.3\npreset = local\nbeta2 = 0.6\n").unwrap();
        assert_eq!(cfg.edit.beta1, 0.3);
        assert_eq!(cfg.edit.beta2, 0.6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            parse_config("no_such_key = 1\n"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let got = parse_config("thr = 0.3\nnot a pair\n");
        assert!(matches!(got, Err(ConfigError::Malformed { line: 2 })));
    }

    #[test]
    fn invalid_stage_bounds_are_rejected() {
        assert!(parse_config("beta1 = 0.9\nbeta2 = 0.2\n").is_err());
    }
}
