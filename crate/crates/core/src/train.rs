//! One-time pre-training of the codec and the base denoiser on the
//! synthetic corpus. Both are trained once, saved, and frozen; editing jobs
//! only ever train adapters.

use firstframe_tensor::{Array, RngStream, Scalar, Tape};

use crate::codec::Codec;
use crate::denoiser::{Denoiser, DenoiserConfig, ForwardInput, NoObserver};
use crate::error::TrainError;
use crate::params::{Adam, ParamBinder};
use crate::synth::{random_video, render, SynthVideo};

#[derive(Debug, Clone)]
pub struct BaseTrainConfig {
    pub pixel_w: usize,
    pub pixel_h: usize,
    pub clip_length: usize,
    pub videos: usize,
    pub frames_per_video: usize,
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub model_steps: usize,
    pub model_lr: f64,
    pub model: DenoiserConfig,
    /// Log-normal sigma sampling parameters.
    pub p_mean: f64,
    pub p_std: f64,
    /// Fraction of steps drawing sigma log-uniformly over the full schedule
    /// range so the top noise levels stay in distribution.
    pub wide_sigma_fraction: f64,
    /// Fraction of steps drawing sigma log-uniformly from the lowest band.
    pub low_sigma_fraction: f64,
    pub sigma_cond: f64,
    /// Pixel-noise augmentation range (log-uniform). Every training view
    /// carries small sensor-like noise, so exactly-constant regions are out
    /// of distribution at inversion time.
    pub aug_noise: (f64, f64),
    pub seed: u64,
}

impl BaseTrainConfig {
    /// Default desk configuration: 32x32 pixels, 14-frame clips.
    pub fn desk32() -> Self {
        Self {
            pixel_w: 32,
            pixel_h: 32,
            clip_length: 14,
            videos: 24,
            frames_per_video: 27,
            codec_steps: 700,
            codec_batch: 8,
            codec_lr: 2e-3,
            model_steps: 900,
            model_lr: 1e-3,
            model: DenoiserConfig {
                c_lat: 4,
                width: 32,
                heads: 4,
                cond_dim: 32,
                sigma_dim: 16,
                groups: 8,
                sigma_data: 1.0,
            },
            p_mean: -1.2,
            p_std: 1.2,
            wide_sigma_fraction: 0.2,
            low_sigma_fraction: 0.25,
            sigma_cond: crate::edm::DEFAULT_SIGMA_COND,
            aug_noise: (0.004, 0.012),
            seed: 0,
        }
    }

    /// Small configuration for fast verification runs: 16x16 pixels,
    /// 8-frame clips.
    pub fn mini16() -> Self {
        Self {
            pixel_w: 16,
            pixel_h: 16,
            clip_length: 8,
            videos: 24,
            frames_per_video: 16,
            codec_steps: 500,
            codec_batch: 8,
            codec_lr: 2e-3,
            model_steps: 1200,
            model_lr: 1.5e-3,
            model: DenoiserConfig {
                c_lat: 4,
                width: 16,
                heads: 4,
                cond_dim: 16,
                sigma_dim: 16,
                groups: 4,
                sigma_data: 1.0,
            },
            p_mean: -1.2,
            p_std: 1.2,
            wide_sigma_fraction: 0.2,
            low_sigma_fraction: 0.25,
            sigma_cond: crate::edm::DEFAULT_SIGMA_COND,
            aug_noise: (0.004, 0.012),
            seed: 0,
        }
    }
}

pub struct TrainedBase {
    pub codec: Codec<f32>,
    pub model: Denoiser<f32>,
    pub corpus: Vec<SynthVideo>,
    pub codec_losses: Vec<f64>,
    pub model_losses: Vec<f64>,
}

/// Render the deterministic training corpus for a config.
pub fn make_corpus(cfg: &BaseTrainConfig) -> Vec<SynthVideo> {
    let mut rng = RngStream::derive(cfg.seed, "train.corpus");
    (0..cfg.videos)
        .map(|_| {
            render(&random_video(
                &mut rng,
                cfg.pixel_w,
                cfg.pixel_h,
                cfg.frames_per_video,
            ))
        })
        .collect()
}

/// Clamped additive pixel noise at a log-uniformly drawn scale.
fn apply_pixel_noise(batch: &mut Array<f32>, rng: &mut RngStream, range: (f64, f64)) {
    let sigma = rng.uniform_in(range.0.ln(), range.1.ln()).exp() as f32;
    for v in batch.data_mut() {
        *v = (*v + sigma * rng.normal() as f32).clamp(-1.0, 1.0);
    }
}

/// Stepped decay: full rate, then half, then a quarter.
fn lr_decay(step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    if p < 0.6 {
        1.0
    } else if p < 0.85 {
        0.5
    } else {
        0.25
    }
}

fn frames_to_batch<T: Scalar>(videos: &[SynthVideo], picks: &[(usize, usize)]) -> Array<T> {
    let f0 = &videos[picks[0].0].frames[picks[0].1];
    let (h, w) = (f0.height, f0.width);
    let mut data = Vec::with_capacity(picks.len() * 3 * h * w);
    for &(vi, fi) in picks {
        data.extend(videos[vi].frames[fi].data().iter().map(|&v| T::from_f32(v)));
    }
    Array::new(vec![picks.len(), 3, h, w], data)
}

/// Train the codec, measure its bounds, then train the denoiser on frozen
/// latents. Fully deterministic given the config seed.
pub fn train_base(cfg: &BaseTrainConfig) -> Result<TrainedBase, TrainError> {
    let corpus = make_corpus(cfg);

    // Codec: per-frame reconstruction with a mild latent-scale penalty.
    let mut codec: Codec<f32> = Codec::conv(cfg.model.c_lat, cfg.seed);
    let mut opt = Adam::new(cfg.codec_lr, codec.params.len());
    let mut pick_rng = RngStream::derive(cfg.seed, "train.codec.picks");
    let mut codec_losses = Vec::with_capacity(cfg.codec_steps);
    for step in 0..cfg.codec_steps {
        let picks: Vec<(usize, usize)> = (0..cfg.codec_batch)
            .map(|_| {
                let vi = pick_rng.below(corpus.len());
                let fi = pick_rng.below(corpus[vi].frames.len());
                (vi, fi)
            })
            .collect();
        let mut batch = frames_to_batch::<f32>(&corpus, &picks);
        apply_pixel_noise(&mut batch, &mut pick_rng, cfg.aug_noise);
        opt.lr = cfg.codec_lr * lr_decay(step, cfg.codec_steps);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&codec.params);
        let x = tape.input(batch);
        let z = codec.encode_on_tape(&mut tape, &mut binder, x);
        let recon = codec.decode_on_tape(&mut tape, &mut binder, z);
        let rec_loss = tape.mse(recon, x);
        let z_sq = tape.mul(z, z);
        let z_mag = tape.mean_all(z_sq);
        let z_pen = tape.scale(z_mag, 1e-3);
        let loss = tape.add(rec_loss, z_pen);
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(TrainError::Diverged {
                what: "codec",
                step,
            });
        }
        codec_losses.push(lv);
        let mut grads = tape.backward(loss);
        let collected = binder.collect(&mut grads);
        opt.step(&mut codec.params, &collected);
    }

    // Record reconstruction and latent bounds on fresh clips.
    let mut bound_rng = RngStream::derive(cfg.seed, "train.codec.bounds");
    let mut recon_bound = 0f32;
    let mut latent_bound = 0f32;
    for _ in 0..24 {
        let vi = bound_rng.below(corpus.len());
        let video = &corpus[vi];
        let picks: Vec<(usize, usize)> = (0..4).map(|_| (vi, bound_rng.below(video.frames.len()))).collect();
        let x = frames_to_batch::<f32>(&corpus, &picks);
        let z = codec.encode_array(&x);
        let recon = codec.decode_array(&z);
        let rel = recon.rel_l2(&x) as f32;
        recon_bound = recon_bound.max(rel);
        latent_bound = latent_bound.max(z.max_abs() as f32);
    }
    codec.recon_bound = recon_bound * 1.25;
    codec.latent_bound = latent_bound * 1.25;

    // Precompute noise-augmented pixel variants and their latents with the
    // frozen codec. Each variant is one sensor-noise realization of a video.
    const NOISE_VARIANTS: usize = 3;
    let mut aug_rng = RngStream::derive(cfg.seed, "train.augment");
    let mut variant_pixels: Vec<Vec<Array<f32>>> = Vec::with_capacity(corpus.len());
    let mut variant_latents: Vec<Vec<Array<f32>>> = Vec::with_capacity(corpus.len());
    for v in &corpus {
        let mut d = Vec::new();
        for f in &v.frames {
            d.extend_from_slice(f.data());
        }
        let clean: Array<f32> = Array::new(
            vec![v.frames.len(), 3, v.frames[0].height, v.frames[0].width],
            d,
        );
        let mut pixels = Vec::with_capacity(NOISE_VARIANTS);
        let mut latents = Vec::with_capacity(NOISE_VARIANTS);
        for _ in 0..NOISE_VARIANTS {
            let mut noisy = clean.clone();
            apply_pixel_noise(&mut noisy, &mut aug_rng, cfg.aug_noise);
            latents.push(codec.encode_array(&noisy));
            pixels.push(noisy);
        }
        variant_pixels.push(pixels);
        variant_latents.push(latents);
    }
    let frame_latents: Vec<Array<f32>> = variant_latents.iter().map(|v| v[0].clone()).collect();

    // Denoiser: clean-latent prediction under the mixed sigma distribution.
    // The preconditioning scale tracks the measured latent spread.
    let mut sq = 0.0f64;
    let mut count = 0usize;
    for lat in &frame_latents {
        for &v in lat.data() {
            sq += (v as f64) * (v as f64);
            count += 1;
        }
    }
    let sigma_data = (sq / count as f64).sqrt().max(0.05);
    let mut model_cfg = cfg.model.clone();
    model_cfg.sigma_data = sigma_data;
    let mut model: Denoiser<f32> = Denoiser::new(model_cfg, cfg.seed);
    let mut opt = Adam::new(cfg.model_lr, model.params.len());
    let mut rng = RngStream::derive(cfg.seed, "train.model");
    let mut model_losses = Vec::with_capacity(cfg.model_steps);
    let lat_shape = frame_latents[0].shape().to_vec();
    let (c_lat, lh, lw) = (lat_shape[1], lat_shape[2], lat_shape[3]);
    let sigma_max = crate::edm::DEFAULT_SIGMA_MAX;
    let sigma_min = crate::edm::DEFAULT_SIGMA_MIN;

    for step in 0..cfg.model_steps {
        let vi = rng.below(corpus.len());
        let video = &corpus[vi];
        let max_start = video.frames.len() - cfg.clip_length;
        let _ = video;
        let start = if max_start == 0 { 0 } else { rng.below(max_start + 1) };

        // A noise-variant window of cached latents [L, C, h, w].
        let variant = rng.below(NOISE_VARIANTS);
        let lat = &variant_latents[vi][variant];
        let pix = &variant_pixels[vi][variant];
        let plane = c_lat * lh * lw;
        let z0 = Array::new(
            vec![cfg.clip_length, c_lat, lh, lw],
            lat.data()[start * plane..(start + cfg.clip_length) * plane].to_vec(),
        );
        let pix_plane = 3 * cfg.pixel_h * cfg.pixel_w;
        let cond_frame = Array::new(
            vec![3, cfg.pixel_h, cfg.pixel_w],
            pix.data()[start * pix_plane..(start + 1) * pix_plane].to_vec(),
        );
        let tau_c = Array::new(
            vec![c_lat, lh, lw],
            lat.data()[start * plane..(start + 1) * plane].to_vec(),
        );

        // Mixture: log-normal bulk, a wide log-uniform band for the top of
        // the schedule, and a low band so the near-clean score (where
        // smooth-area perturbation acts) is well trained.
        let u = rng.uniform();
        let sigma = if u < cfg.wide_sigma_fraction {
            (rng.uniform_in(sigma_min.ln(), sigma_max.ln())).exp()
        } else if u < cfg.wide_sigma_fraction + cfg.low_sigma_fraction {
            (rng.uniform_in(sigma_min.ln(), 0.05f64.ln())).exp()
        } else {
            (cfg.p_mean + cfg.p_std * rng.normal()).exp()
        };
        let eps: Array<f32> = rng.fill_normal(z0.shape());
        let st = sigma as f32;
        let z_t = z0.zip(&eps, |z, e| z + st * e);
        let eps_c: Array<f32> = rng.fill_normal(tau_c.shape());
        let sc = cfg.sigma_cond as f32;
        let c_sigma = tau_c.zip(&eps_c, |c, e| c + sc * e);

        let mut tape = Tape::new();
        let input = ForwardInput {
            z: &z_t,
            sigma,
            cond_latent: &c_sigma,
            cond_frame: &cond_frame,
        };
        let (pred, binder) = model.forward(&mut tape, &input, None, &mut NoObserver)?;
        let target = tape.input(z0);
        let loss = tape.mse(pred, target);
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(TrainError::Diverged {
                what: "denoiser",
                step,
            });
        }
        model_losses.push(lv);
        let mut grads = tape.backward(loss);
        let collected = binder.collect(&mut grads);
        opt.step(&mut model.params, &collected);
    }

    Ok(TrainedBase {
        codec,
        model,
        corpus,
        codec_losses,
        model_losses,
    })
}
