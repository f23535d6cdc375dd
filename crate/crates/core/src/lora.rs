//! Per-clip low-rank adapters on temporal-attention projections.
//!
//! Adapters hold factors A (r x k, small gaussian init) and B (d x r, zero
//! init) so the effective update `scale * B A` starts at exactly zero and
//! the adapted model begins bit-identical to the base. Training optimizes
//! the clean-latent reconstruction loss with log-normal noise levels and
//! cached conditional latents; only adapter parameters move.

use std::path::Path;

use firstframe_tensor::{Array, RngStream, Scalar, Tape};

use crate::artifact::{BlockReader, BlockWriter};
use crate::codec::Codec;
use crate::denoiser::{frame_to_array, Denoiser, ForwardInput, NoObserver, Proj};
use crate::error::{ArtifactError, LoraError};
use crate::media::FrameClip;
use crate::params::{ParamBinder, ParamHandle, ParamSet, SgdMomentum};
use crate::skip::{KvCache, SkipInjector};

const LORA_MAGIC: &[u8] = b"FFLORA01";
const LORA_VERSION: u32 = 1;

/// A standalone adapter value: factors plus target metadata.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Scalar> {
    pub layer_id: String,
    pub projection: Proj,
    pub rank: usize,
    pub scale: f64,
    /// `[rank, k]`
    pub a: Array<T>,
    /// `[d, rank]`
    pub b: Array<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Identity-start initialization: A ~ N(0, 0.01^2), B = 0.
    pub fn init(
        layer_id: &str,
        projection: Proj,
        d: usize,
        k: usize,
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = RngStream::derive(seed, &format!("lora.init.{layer_id}.{}", projection.name()));
        Self {
            layer_id: layer_id.to_string(),
            projection,
            rank,
            scale,
            a: rng.fill_normal_scaled(&[rank, k], 0.01),
            b: Array::zeros(&[d, rank]),
        }
    }

    /// W0 + scale * B A, dense.
    pub fn apply(&self, w0: &Array<T>) -> Result<Array<T>, LoraError> {
        apply_adapter(w0, &self.b, &self.a, self.scale)
    }
}

/// Pure dense application of a low-rank update.
pub fn apply_adapter<T: Scalar>(
    w0: &Array<T>,
    b: &Array<T>,
    a: &Array<T>,
    scale: f64,
) -> Result<Array<T>, LoraError> {
    let (ws, bs, as_) = (w0.shape(), b.shape(), a.shape());
    if ws.len() != 2 || bs.len() != 2 || as_.len() != 2 || bs[1] != as_[0] || ws[0] != bs[0] || ws[1] != as_[1]
    {
        return Err(LoraError::ShapeMismatch {
            d: ws.first().copied().unwrap_or(0),
            k: ws.get(1).copied().unwrap_or(0),
            bd: bs.first().copied().unwrap_or(0),
            br: bs.get(1).copied().unwrap_or(0),
            ar: as_.first().copied().unwrap_or(0),
            ak: as_.get(1).copied().unwrap_or(0),
        });
    }
    let (d, r, k) = (bs[0], bs[1], as_[1]);
    let mut ba = vec![T::ZERO; d * k];
    firstframe_tensor::kernels::matmul_nn(b.data(), a.data(), d, r, k, &mut ba);
    let s = T::from_f64(scale);
    let mut out = w0.data().to_vec();
    for (o, &u) in out.iter_mut().zip(ba.iter()) {
        *o = *o + s * u;
    }
    Ok(Array::new(ws.to_vec(), out))
}

#[derive(Debug, Clone)]
pub struct AdapterMeta {
    pub layer_id: String,
    pub projection: Proj,
    pub rank: usize,
    pub scale: f64,
    a: ParamHandle,
    b: ParamHandle,
}

impl AdapterMeta {
    pub fn a_handle(&self) -> ParamHandle {
        self.a
    }
    pub fn b_handle(&self) -> ParamHandle {
        self.b
    }
}

/// A set of adapters whose factors live in one optimizable parameter set.
#[derive(Debug, Clone, Default)]
pub struct AdapterSet<T: Scalar> {
    params: ParamSet<T>,
    adapters: Vec<AdapterMeta>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn new() -> Self {
        Self {
            params: ParamSet::new(),
            adapters: Vec::new(),
        }
    }

    pub fn push(&mut self, adapter: LoraAdapter<T>) {
        let a = self.params.add(
            format!("{}.{}.a", adapter.layer_id, adapter.projection.name()),
            adapter.a,
        );
        let b = self.params.add(
            format!("{}.{}.b", adapter.layer_id, adapter.projection.name()),
            adapter.b,
        );
        self.adapters.push(AdapterMeta {
            layer_id: adapter.layer_id,
            projection: adapter.projection,
            rank: adapter.rank,
            scale: adapter.scale,
            a,
            b,
        });
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterMeta> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn param(&self, h: ParamHandle) -> &Array<T> {
        self.params.get(h)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn digest(&self) -> u64 {
        self.params.digest()
    }

    /// Fresh zero-update adapters for every temporal site of `model`.
    pub fn init_for_model(model: &Denoiser<T>, rank: usize, scale: f64, seed: u64) -> Self {
        let mut set = Self::new();
        for site in model.temporal_sites() {
            let c = model.cfg.width * site.downscale_factor;
            for proj in Proj::ALL {
                set.push(LoraAdapter::init(&site.layer_id, proj, c, c, rank, scale, seed));
            }
        }
        set
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let mut w = BlockWriter::create(path, LORA_MAGIC, LORA_VERSION)?;
        w.u32(self.adapters.len() as u32)?;
        for ad in &self.adapters {
            w.str(&ad.layer_id)?;
            w.u32(match ad.projection {
                Proj::Query => 0,
                Proj::Key => 1,
                Proj::Value => 2,
                Proj::Output => 3,
            })?;
            w.u32(ad.rank as u32)?;
            w.f32(ad.scale as f32)?;
            w.array("a", self.params.get(ad.a))?;
            w.array("b", self.params.get(ad.b))?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let mut r = BlockReader::open(path, LORA_MAGIC, LORA_VERSION)?;
        let count = r.u32()? as usize;
        let mut set = Self::new();
        for _ in 0..count {
            let layer_id = r.str()?;
            let proj = match r.u32()? {
                0 => Proj::Query,
                1 => Proj::Key,
                2 => Proj::Value,
                3 => Proj::Output,
                other => {
                    return Err(ArtifactError::Corrupt {
                        path: path.to_path_buf(),
                        detail: format!("unknown projection tag {other}"),
                    })
                }
            };
            let rank = r.u32()? as usize;
            let scale = r.f32()? as f64;
            let (an, a) = r.array::<T>()?;
            let (bn, b) = r.array::<T>()?;
            if an != "a" || bn != "b" {
                return Err(ArtifactError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("expected a/b arrays, got {an}/{bn}"),
                });
            }
            set.push(LoraAdapter {
                layer_id,
                projection: proj,
                rank,
                scale,
                a,
                b,
            });
        }
        r.expect_eof()?;
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct MotionTrainConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Log-normal noise-level sampling: sigma = exp(p_mean + p_std * n).
    pub p_mean: f64,
    pub p_std: f64,
    /// Noise scale added to the cached conditional latents.
    pub sigma_cond: f64,
    pub scale: f64,
    pub seed: u64,
    pub skip_interval_enabled: bool,
}

impl Default for MotionTrainConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            steps: 250,
            lr: 1e-3,
            momentum: 0.9,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_cond: 0.02,
            scale: 1.0,
            seed: 0,
            skip_interval_enabled: true,
        }
    }
}

/// Outcome of one adapter training run.
pub struct MotionTrainResult<T: Scalar> {
    pub adapters: AdapterSet<T>,
    pub losses: Vec<f64>,
}

/// Train adapters for one clip against a frozen base model.
///
/// Latents are cached once: the clip is encoded up front and each step adds
/// fresh noise at a log-normally sampled level; the conditional latents are
/// the encoded first frame plus `sigma_cond` noise. When `skip_cache` is
/// given, temporal attention runs in skip-interval mode throughout, pairing
/// each step with the cache entry nearest in noise level.
pub fn train_motion_lora<T: Scalar>(
    clip: &FrameClip,
    model: &Denoiser<T>,
    codec: &Codec<T>,
    cfg: &MotionTrainConfig,
    skip_cache: Option<&KvCache<T>>,
) -> Result<MotionTrainResult<T>, LoraError> {
    let z0 = codec.encode(clip)?;
    let cond_frame = frame_to_array::<T>(&clip.frames[0]);
    let tau_c = codec.encode_frame(&clip.frames[0])?;

    let mut adapters = AdapterSet::init_for_model(model, cfg.rank, cfg.scale, cfg.seed);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, adapters.params().len());
    let mut sigma_rng = RngStream::derive(cfg.seed, "lora.train.sigma");
    let mut noise_rng = RngStream::derive(cfg.seed, "lora.train.noise");
    let mut cond_rng = RngStream::derive(cfg.seed, "lora.train.cond");
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let sigma_t = (cfg.p_mean + cfg.p_std * sigma_rng.normal()).exp();
        let eps: Array<T> = noise_rng.fill_normal(z0.data.shape());
        let st = T::from_f64(sigma_t);
        let z_t = z0.data.zip(&eps, |z, e| z + st * e);

        let eps_c: Array<T> = cond_rng.fill_normal(tau_c.shape());
        let sc = T::from_f64(cfg.sigma_cond);
        let c_sigma = tau_c.zip(&eps_c, |c, e| c + sc * e);

        let mut tape = Tape::new();
        let mut adapter_binder = ParamBinder::new(adapters.params());
        let bound = model.bind_adapters(
            &mut tape,
            &adapters,
            Some((&mut adapter_binder, adapters.params())),
        )?;
        let input = ForwardInput {
            z: &z_t,
            sigma: sigma_t,
            cond_latent: &c_sigma,
            cond_frame: &cond_frame,
        };
        let target = tape.input(z0.data.clone());
        let loss_value;
        {
            let (pred, _model_binder) = if cfg.skip_interval_enabled && skip_cache.is_some() {
                let mut injector = SkipInjector::for_sigma(skip_cache.unwrap(), sigma_t);
                model.forward(&mut tape, &input, Some(&bound), &mut injector)?
            } else {
                model.forward(&mut tape, &input, Some(&bound), &mut NoObserver)?
            };
            let loss = tape.mse(pred, target);
            loss_value = tape.value(loss).item().to_f64();
            if !loss_value.is_finite() {
                return Err(LoraError::Diverged { step });
            }
            let mut grads = tape.backward(loss);
            let collected = adapter_binder.collect(&mut grads);
            opt.step(adapters.params_mut(), &collected);
        }
        losses.push(loss_value);
    }

    Ok(MotionTrainResult { adapters, losses })
}
