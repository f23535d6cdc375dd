//! Smooth-area random perturbation and normality diagnostics.
//!
//! Deterministic inversion degrades on clips with large constant-pixel
//! regions; adding a small seeded perturbation only where image gradients
//! vanish pushes the inverted latents back toward Gaussian. Smoothness is
//! detected by Sobel gradient thresholding on luminance.

use firstframe_tensor::RngStream;

use crate::error::SarpError;
use crate::media::{Frame, FrameClip};

pub const DEFAULT_GRADIENT_THRESHOLD: f64 = 0.001;
pub const DEFAULT_ALPHA: f64 = 0.005;
/// Noise scale for latent-domain perturbation mode.
pub const DEFAULT_LATENT_ALPHA: f64 = 0.02;
/// Pixel-domain noise scales outside this range trigger a config warning.
pub const ALPHA_WARN_RANGE: (f64, f64) = (0.0005, 0.005);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    Off,
    Smooth,
    NonSmooth,
    Latent,
}

impl PerturbMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(Self::Off),
            "smooth" => Some(Self::Smooth),
            "non_smooth" => Some(Self::NonSmooth),
            "latent" => Some(Self::Latent),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::Smooth => "smooth",
            Self::NonSmooth => "non_smooth",
            Self::Latent => "latent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SarpConfig {
    pub alpha: f64,
    pub gradient_threshold: f64,
    pub mode: PerturbMode,
    /// Latent-mode noise scale, applied post-encode by the pipeline.
    pub latent_alpha: f64,
    pub seed: u64,
}

impl Default for SarpConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gradient_threshold: DEFAULT_GRADIENT_THRESHOLD,
            mode: PerturbMode::Smooth,
            latent_alpha: DEFAULT_LATENT_ALPHA,
            seed: 0,
        }
    }
}

impl SarpConfig {
    /// Non-fatal advisories; alpha outside the sanctioned range still runs.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.alpha > 0.0
            && (self.alpha < ALPHA_WARN_RANGE.0 || self.alpha > ALPHA_WARN_RANGE.1)
        {
            out.push(format!(
                "sarp.alpha = {} outside sanctioned range [{}, {}]",
                self.alpha, ALPHA_WARN_RANGE.0, ALPHA_WARN_RANGE.1
            ));
        }
        out
    }
}

/// Per-frame binary smooth-area mask, `[L, H, W]`, 1 marks smooth pixels.
#[derive(Debug, Clone)]
pub struct SmoothMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub gradient_threshold: f64,
    data: Vec<u8>,
}

impl SmoothMask {
    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> u8 {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn smooth_fraction(&self) -> f64 {
        let ones = self.data.iter().filter(|&&v| v == 1).count();
        ones as f64 / self.data.len() as f64
    }
}

/// Luminance in [0,1]: channel mean of the [-1,1] pixels remapped to [0,1].
fn luminance(frame: &Frame) -> Vec<f64> {
    let (h, w) = (frame.height, frame.width);
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = frame.get(0, y, x) as f64;
            let g = frame.get(1, y, x) as f64;
            let b = frame.get(2, y, x) as f64;
            out[y * w + x] = (r + g + b + 3.0) / 6.0;
        }
    }
    out
}

/// 3x3 Sobel gradient magnitude with replicate border padding.
pub fn sobel_magnitude(lum: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        lum[yy * w + xx]
    };
    let mut out = vec![0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Mark pixels whose Sobel gradient magnitude is at or below `threshold`.
pub fn detect_smooth(clip: &FrameClip, threshold: f64) -> SmoothMask {
    let (h, w) = (clip.height(), clip.width());
    let mut data = Vec::with_capacity(clip.len() * h * w);
    for frame in &clip.frames {
        let lum = luminance(frame);
        let mag = sobel_magnitude(&lum, h, w);
        data.extend(mag.iter().map(|&m| u8::from(m <= threshold)));
    }
    SmoothMask {
        frames: clip.len(),
        height: h,
        width: w,
        gradient_threshold: threshold,
        data,
    }
}

/// Apply mode-gated pixel perturbation. Outside the (mode-appropriate) mask
/// the output is bit-identical to the input; inside, `alpha * eps` is added
/// with `eps` drawn i.i.d. from the config seed, then clamped to [-1, 1].
pub fn perturb(
    clip: &FrameClip,
    mask: &SmoothMask,
    cfg: &SarpConfig,
) -> Result<FrameClip, SarpError> {
    let (h, w) = (clip.height(), clip.width());
    if mask.frames != clip.len() || mask.height != h || mask.width != w {
        return Err(SarpError::MaskShapeMismatch {
            got: vec![mask.frames, mask.height, mask.width],
            want: vec![clip.len(), h, w],
        });
    }
    let mut out = clip.clone();
    if matches!(cfg.mode, PerturbMode::Off | PerturbMode::Latent) {
        return Ok(out);
    }
    let want_mask_value = match cfg.mode {
        PerturbMode::Smooth => 1u8,
        PerturbMode::NonSmooth => 0u8,
        _ => unreachable!(),
    };
    let mut rng = RngStream::derive(cfg.seed, "sarp.perturb");
    let alpha = cfg.alpha as f32;
    for (t, frame) in out.frames.iter_mut().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    // One draw per (frame, channel, y, x) so replaying the
                    // stream reproduces the noise exactly.
                    let eps = rng.normal() as f32;
                    if mask.get(t, y, x) == want_mask_value {
                        let v = (frame.get(c, y, x) + alpha * eps).clamp(-1.0, 1.0);
                        frame.set(c, y, x, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Add latent-domain perturbation (the LRP ablation mode): alpha_lat * eps
/// over every latent entry, seeded and labeled.
pub fn perturb_latents<T: firstframe_tensor::Scalar>(
    z: &mut crate::codec::LatentSeq<T>,
    alpha_lat: f64,
    seed: u64,
    label: &str,
) {
    let mut rng = RngStream::derive(seed, &format!("sarp.latent.{label}"));
    let eps: firstframe_tensor::Array<T> = rng.fill_normal(z.data.shape());
    let a = T::from_f64(alpha_lat);
    z.data = z.data.zip(&eps, |zi, ei| zi + a * ei);
}

/// One line of a SARP diagnostics report.
#[derive(Debug, Clone)]
pub struct SarpReportLine {
    pub mode: PerturbMode,
    pub a_squared: f64,
    pub n: usize,
}

/// Per-mode Anderson statistics over inverted latents of one video.
#[derive(Debug, Clone)]
pub struct SarpReport {
    pub clip_count: usize,
    pub steps: usize,
    pub seed: u64,
    pub lines: Vec<SarpReportLine>,
}

impl std::fmt::Display for SarpReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "# sarp report: clips={} steps={} seed={}",
            self.clip_count, self.steps, self.seed
        )?;
        for line in &self.lines {
            writeln!(f, "{} {:.6} {}", line.mode.name(), line.a_squared, line.n)?;
        }
        Ok(())
    }
}

/// Invert every clip of `frames` under each requested perturbation mode and
/// report the Anderson statistic over all inverted latent entries.
#[allow(clippy::too_many_arguments)]
pub fn sarp_report(
    frames: &[crate::media::Frame],
    clip_length: usize,
    model: &crate::denoiser::Denoiser<f32>,
    codec: &crate::codec::Codec<f32>,
    schedule: &crate::edm::NoiseSchedule,
    cfg: &SarpConfig,
    modes: &[PerturbMode],
) -> Result<SarpReport, SarpError> {
    use crate::edm::{invert, make_conditioning, NoStepObserver};

    let plan = crate::media::segment_clips(frames.len(), clip_length)
        .map_err(|e| SarpError::Edm(crate::error::EdmError::Model(
            crate::error::ModelError::ShapeMismatch(e.to_string()),
        )))?;
    let mut lines = Vec::new();
    for &mode in modes {
        let mut entries: Vec<f64> = Vec::new();
        for ci in 0..plan.num_clips() {
            let clip = crate::media::clip_frames(frames, &plan, ci);
            let mask = detect_smooth(&clip, cfg.gradient_threshold);
            let clip_cfg = SarpConfig {
                mode,
                seed: firstframe_tensor::derive_seed(cfg.seed, &format!("sarp.clip{ci}")),
                ..cfg.clone()
            };
            let perturbed = perturb(&clip, &mask, &clip_cfg)?;
            let mut z0 = codec.encode(&perturbed)?;
            if mode == PerturbMode::Latent {
                perturb_latents(&mut z0, cfg.latent_alpha, cfg.seed, &format!("clip{ci}"));
            }
            let cond = make_conditioning(
                codec,
                &perturbed.frames[0],
                crate::edm::DEFAULT_SIGMA_COND,
                cfg.seed,
                &format!("sarp.report.clip{ci}"),
            )?;
            let z_t = invert(model, &z0, &cond, schedule, None, &mut NoStepObserver)?;
            // Standardize by the top noise level so entries are O(1).
            let scale = 1.0 / schedule.sigma(0);
            entries.extend(z_t.data.data().iter().map(|&v| v as f64 * scale));
        }
        let n = entries.len();
        let a_squared = anderson_statistic(&entries)?;
        lines.push(SarpReportLine {
            mode,
            a_squared,
            n,
        });
    }
    Ok(SarpReport {
        clip_count: plan.num_clips(),
        steps: schedule.steps(),
        seed: cfg.seed,
        lines,
    })
}

/// Standard normal CDF via erfc.
fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail 1 - phi(x), computed directly for symmetry.
fn phi_upper(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

const LN_FLOOR: f64 = 1e-300;

fn standardized_sorted(samples: &[f64]) -> Result<Vec<f64>, SarpError> {
    if samples.len() < 8 {
        return Err(SarpError::TooFewSamples {
            got: samples.len(),
            min: 8,
        });
    }
    if !samples.iter().all(|v| v.is_finite()) {
        return Err(SarpError::NonFinite);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(SarpError::ZeroVariance);
    }
    let std = var.sqrt();
    let mut w: Vec<f64> = samples.iter().map(|v| (v - mean) / std).collect();
    w.sort_by(f64::total_cmp);
    Ok(w)
}

/// Anderson-Darling normality statistic with estimated mean and variance,
/// small-sample corrected: A*^2 = A^2 (1 + 4/n - 25/n^2). Lower is closer
/// to Gaussian.
pub fn anderson_statistic(samples: &[f64]) -> Result<f64, SarpError> {
    let w = standardized_sorted(samples)?;
    let n = w.len();
    let nf = n as f64;
    let mut sum = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        let lo = phi(wi).max(LN_FLOOR);
        let hi = phi_upper(wi).max(LN_FLOOR);
        let k_lo = (2 * (i + 1) - 1) as f64;
        let k_hi = (2 * (n - (i + 1)) + 1) as f64;
        sum += k_lo * lo.ln() + k_hi * hi.ln();
    }
    let a2 = -nf - sum / nf;
    Ok(a2 * (1.0 + 4.0 / nf - 25.0 / (nf * nf)))
}

/// Independent route for the same statistic: the mirrored order-statistics
/// form. Kept as a test oracle; must agree with [`anderson_statistic`].
pub fn anderson_statistic_mirrored(samples: &[f64]) -> Result<f64, SarpError> {
    let w = standardized_sorted(samples)?;
    let n = w.len();
    let nf = n as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let a = phi(w[i]).max(LN_FLOOR);
        let b = phi_upper(w[n - 1 - i]).max(LN_FLOOR);
        sum += (2 * (i + 1) - 1) as f64 * (a.ln() + b.ln());
    }
    let a2 = -nf - sum / nf;
    Ok(a2 * (1.0 + 4.0 / nf - 25.0 / (nf * nf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::FrameClip;

    fn clip_of(frames: Vec<Frame>) -> FrameClip {
        FrameClip {
            frames,
            clip_index: 1,
            first_frame_is_condition: true,
        }
    }

    #[test]
    fn constant_clip_is_all_smooth() {
        let clip = clip_of(vec![Frame::constant(8, 8, [0.0, 0.0, 0.0]); 3]);
        let mask = detect_smooth(&clip, DEFAULT_GRADIENT_THRESHOLD);
        assert!(mask.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn vertical_step_edge_masks_exactly_two_columns() {
        let (h, w) = (8, 10);
        let k = 4; // first column of the high side
        let mut frame = Frame::constant(h, w, [-0.5, -0.5, -0.5]);
        for y in 0..h {
            for x in k..w {
                for c in 0..3 {
                    frame.set(c, y, x, 0.5);
                }
            }
        }
        let clip = clip_of(vec![frame]);
        let mask = detect_smooth(&clip, DEFAULT_GRADIENT_THRESHOLD);
        for y in 0..h {
            for x in 0..w {
                let expected = if x == k - 1 || x == k { 0 } else { 1 };
                assert_eq!(mask.get(0, y, x), expected, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn white_noise_clip_is_almost_nowhere_smooth() {
        let mut rng = RngStream::from_seed(31);
        let (h, w) = (32, 32);
        let mut frames = Vec::new();
        for _ in 0..4 {
            let data: Vec<f32> = (0..3 * h * w)
                .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                .collect();
            frames.push(Frame::new(h, w, data));
        }
        let mask = detect_smooth(&clip_of(frames), DEFAULT_GRADIENT_THRESHOLD);
        assert!(
            mask.smooth_fraction() < 0.01,
            "smooth fraction {}",
            mask.smooth_fraction()
        );
    }

    #[test]
    fn detection_is_deterministic() {
        let clip = clip_of(vec![Frame::constant(6, 6, [0.25, -0.5, 0.75]); 2]);
        let a = detect_smooth(&clip, 0.001);
        let b = detect_smooth(&clip, 0.001);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_alpha_or_empty_mask_is_identity() {
        let clip = clip_of(vec![Frame::constant(6, 6, [0.1, 0.2, 0.3]); 2]);
        let mask = detect_smooth(&clip, DEFAULT_GRADIENT_THRESHOLD);

        let cfg = SarpConfig {
            alpha: 0.0,
            seed: 7,
            ..Default::default()
        };
        let out = perturb(&clip, &mask, &cfg).unwrap();
        for (a, b) in out.frames.iter().zip(clip.frames.iter()) {
            assert_eq!(a.data(), b.data());
        }

        // All-zero mask: no smooth pixels to touch.
        let empty = SmoothMask {
            frames: 2,
            height: 6,
            width: 6,
            gradient_threshold: 0.001,
            data: vec![0; 2 * 36],
        };
        let cfg = SarpConfig {
            alpha: 0.005,
            seed: 7,
            ..Default::default()
        };
        let out = perturb(&clip, &empty, &cfg).unwrap();
        for (a, b) in out.frames.iter().zip(clip.frames.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn perturbation_replays_exactly_from_seed_and_is_local() {
        let (h, w) = (6, 6);
        // Left half constant (smooth interior), right half noisy.
        let mut rng = RngStream::from_seed(5150);
        let mut frames = Vec::new();
        for _ in 0..2 {
            let mut f = Frame::constant(h, w, [0.0, 0.0, 0.0]);
            for y in 0..h {
                for x in 3..w {
                    for c in 0..3 {
                        f.set(c, y, x, rng.uniform_in(-0.9, 0.9) as f32);
                    }
                }
            }
            frames.push(f);
        }
        let clip = clip_of(frames);
        let mask = detect_smooth(&clip, DEFAULT_GRADIENT_THRESHOLD);
        let cfg = SarpConfig {
            alpha: 0.005,
            seed: 99,
            ..Default::default()
        };
        let out = perturb(&clip, &mask, &cfg).unwrap();

        // Replay the stream to reproduce expected deltas.
        let mut replay = RngStream::derive(99, "sarp.perturb");
        for t in 0..clip.len() {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let eps = replay.normal() as f32;
                        let delta = out.frames[t].get(c, y, x) - clip.frames[t].get(c, y, x);
                        if mask.get(t, y, x) == 1 {
                            let want = (clip.frames[t].get(c, y, x) + 0.005 * eps)
                                .clamp(-1.0, 1.0)
                                - clip.frames[t].get(c, y, x);
                            assert_eq!(delta, want, "at ({t},{c},{y},{x})");
                        } else {
                            assert_eq!(delta, 0.0, "unmasked pixel changed at ({t},{c},{y},{x})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn non_smooth_mode_swaps_the_mask() {
        let (h, w) = (6, 6);
        let mut f = Frame::constant(h, w, [0.0, 0.0, 0.0]);
        for y in 0..h {
            for x in 3..w {
                f.set(0, y, x, ((y * w + x) % 7) as f32 / 7.0 - 0.5);
            }
        }
        let clip = clip_of(vec![f]);
        let mask = detect_smooth(&clip, DEFAULT_GRADIENT_THRESHOLD);
        let cfg = SarpConfig {
            alpha: 0.005,
            seed: 3,
            mode: PerturbMode::NonSmooth,
            ..Default::default()
        };
        let out = perturb(&clip, &mask, &cfg).unwrap();
        for y in 0..h {
            for x in 0..w {
                let changed = (0..3).any(|c| out.frames[0].get(c, y, x) != clip.frames[0].get(c, y, x));
                if mask.get(0, y, x) == 1 {
                    assert!(!changed, "smooth pixel changed in non_smooth mode at ({y},{x})");
                }
            }
        }
        let any_changed = (0..h).any(|y| {
            (0..w).any(|x| {
                mask.get(0, y, x) == 0
                    && (0..3).any(|c| out.frames[0].get(c, y, x) != clip.frames[0].get(c, y, x))
            })
        });
        assert!(any_changed, "non-smooth pixels should be perturbed");
    }

    #[test]
    fn anderson_routes_agree_to_1e10() {
        let mut rng = RngStream::from_seed(2024);
        for case in 0..100 {
            let n = 8 + rng.below(400);
            let samples: Vec<f64> = if case % 3 == 0 {
                (0..n).map(|_| rng.uniform_in(-2.0, 5.0)).collect()
            } else if case % 3 == 1 {
                (0..n).map(|_| rng.normal()).collect()
            } else {
                (0..n).map(|_| rng.normal().exp()).collect()
            };
            let a = anderson_statistic(&samples).unwrap();
            let b = anderson_statistic_mirrored(&samples).unwrap();
            assert!(
                (a - b).abs() <= 1e-10 * a.abs().max(1.0),
                "case {case}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn anderson_separates_normal_from_uniform() {
        let mut rng = RngStream::from_seed(7);
        let normal: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        let uniform: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let a_normal = anderson_statistic(&normal).unwrap();
        let a_uniform = anderson_statistic(&uniform).unwrap();
        assert!(a_normal < 2.0, "normal statistic {a_normal}");
        assert!(a_uniform > 50.0, "uniform statistic {a_uniform}");
    }

    #[test]
    fn anderson_error_cases() {
        assert!(matches!(
            anderson_statistic(&[1.0; 5]),
            Err(SarpError::TooFewSamples { .. })
        ));
        assert!(matches!(
            anderson_statistic(&[2.5; 64]),
            Err(SarpError::ZeroVariance)
        ));
        let mut v = vec![0.0; 64];
        v[10] = f64::NAN;
        assert!(matches!(anderson_statistic(&v), Err(SarpError::NonFinite)));
    }

    #[test]
    fn alpha_warning_bounds() {
        let mut cfg = SarpConfig::default();
        assert!(cfg.warnings().is_empty());
        cfg.alpha = 0.1;
        assert_eq!(cfg.warnings().len(), 1);
        cfg.alpha = 0.00005;
        assert_eq!(cfg.warnings().len(), 1);
    }
}
