//! Noise schedule, deterministic sampling/inversion, and attention traces.
//!
//! Both directions integrate the probability-flow update d = (z - z0_hat)/sigma
//! with first-order Euler steps and zero stochastic churn, so inversion
//! followed by denoising retraces the same path up to discretization error.
//! Every instrumented attention site is recorded at every step; capture
//! never alters run numerics.
//!
//! Step indexing: index i means "the model evaluated at sigma_i with the
//! state at sigma_i". Denoising visits i = 0..S-1 downward; inversion visits
//! i = S-1..1 upward and adds a record-only evaluation at i = 0 so traces
//! and caches are complete over all steps in both directions.

use std::collections::HashMap;
use std::path::Path;

use firstframe_tensor::{Array, RngStream, Scalar, Tape};

use crate::artifact::{BlockReader, BlockWriter};
use crate::codec::{Codec, LatentSeq};
use crate::denoiser::{
    AttentionObserver, AttnKind, Denoiser, ForwardInput, SiteInfo,
};
use crate::error::{ArtifactError, EdmError};
use crate::lora::AdapterSet;
use crate::media::Frame;
use crate::skip::RunDirection;

const TRACE_MAGIC: &[u8] = b"FFTRACE1";
const TRACE_VERSION: u32 = 1;

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_SIGMA_COND: f64 = 0.02;

/// Power-law noise schedule, strictly decreasing from sigma_max to
/// sigma_min, with an implicit terminal zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    sigmas: Vec<f64>,
}

pub fn build_schedule(
    steps: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
) -> Result<NoiseSchedule, EdmError> {
    if steps < 2 {
        return Err(EdmError::TooFewSteps(steps));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(EdmError::InvalidBounds {
            min: sigma_min,
            max: sigma_max,
        });
    }
    let inv_rho = 1.0 / rho;
    let lo = sigma_min.powf(inv_rho);
    let hi = sigma_max.powf(inv_rho);
    let sigmas = (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            (hi + t * (lo - hi)).powf(rho)
        })
        .collect();
    Ok(NoiseSchedule {
        sigma_min,
        sigma_max,
        rho,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn default_schedule() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, DEFAULT_RHO)
            .expect("defaults are valid")
    }

    pub fn with_steps(steps: usize) -> Result<Self, EdmError> {
        build_schedule(steps, DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, DEFAULT_RHO)
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }
}

/// Conditioning for one sampling run: the conditional frame's pixels for
/// the token encoder plus its noise-augmented latents.
#[derive(Debug, Clone)]
pub struct Conditioning<T: Scalar> {
    pub cond_frame: Array<T>,
    pub c_sigma: Array<T>,
}

/// Build run conditioning: c_sigma = tau(frame) + sigma_cond * eps with eps
/// drawn once from the labeled stream of `seed`.
pub fn make_conditioning<T: Scalar>(
    codec: &Codec<T>,
    frame: &Frame,
    sigma_cond: f64,
    seed: u64,
    label: &str,
) -> Result<Conditioning<T>, EdmError> {
    let tau = codec
        .encode_frame(frame)
        .map_err(|e| EdmError::Model(crate::error::ModelError::ShapeMismatch(e.to_string())))?;
    let mut rng = RngStream::derive(seed, &format!("cond.{label}"));
    let eps: Array<T> = rng.fill_normal(tau.shape());
    let sc = T::from_f64(sigma_cond);
    let c_sigma = tau.zip(&eps, |c, e| c + sc * e);
    Ok(Conditioning {
        cond_frame: crate::denoiser::frame_to_array(frame),
        c_sigma,
    })
}

/// Observer receiving the current step index alongside site callbacks.
pub trait SteppedObserver<T: Scalar> {
    fn extra_kv(&mut self, step: usize, site: &SiteInfo) -> Option<(Array<T>, Array<T>)> {
        let _ = (step, site);
        None
    }
    fn on_kv(&mut self, step: usize, site: &SiteInfo, k: &Array<T>, v: &Array<T>) {
        let _ = (step, site, k, v);
    }
    fn on_probs(&mut self, step: usize, site: &SiteInfo, probs: &Array<T>) -> Option<Array<T>> {
        let _ = (step, site, probs);
        None
    }
}

/// Stepped observer that does nothing.
pub struct NoStepObserver;
impl<T: Scalar> SteppedObserver<T> for NoStepObserver {}

/// Composes several stepped observers. Probability hooks act in order,
/// each layer seeing the previous layer's replacement; the first layer to
/// offer extra K/V wins.
pub struct MultiObserver<'a, T: Scalar> {
    pub layers: Vec<&'a mut dyn SteppedObserver<T>>,
}

impl<T: Scalar> SteppedObserver<T> for MultiObserver<'_, T> {
    fn extra_kv(&mut self, step: usize, site: &SiteInfo) -> Option<(Array<T>, Array<T>)> {
        for layer in self.layers.iter_mut() {
            if let Some(kv) = layer.extra_kv(step, site) {
                return Some(kv);
            }
        }
        None
    }

    fn on_kv(&mut self, step: usize, site: &SiteInfo, k: &Array<T>, v: &Array<T>) {
        for layer in self.layers.iter_mut() {
            layer.on_kv(step, site, k, v);
        }
    }

    fn on_probs(&mut self, step: usize, site: &SiteInfo, probs: &Array<T>) -> Option<Array<T>> {
        let mut current: Option<Array<T>> = None;
        for layer in self.layers.iter_mut() {
            let view = current.as_ref().unwrap_or(probs);
            if let Some(replaced) = layer.on_probs(step, site, view) {
                current = Some(replaced);
            }
        }
        current
    }
}

/// Fixes the step index for one model evaluation.
struct StepAdapter<'a, T: Scalar> {
    step: usize,
    inner: &'a mut dyn SteppedObserver<T>,
}

impl<T: Scalar> AttentionObserver<T> for StepAdapter<'_, T> {
    fn extra_kv(&mut self, site: &SiteInfo) -> Option<(Array<T>, Array<T>)> {
        self.inner.extra_kv(self.step, site)
    }

    fn on_kv(&mut self, site: &SiteInfo, k: &Array<T>, v: &Array<T>) {
        self.inner.on_kv(self.step, site, k, v);
    }

    fn on_probs(&mut self, site: &SiteInfo, probs: &Array<T>) -> Option<Array<T>> {
        self.inner.on_probs(self.step, site, probs)
    }
}

/// Attention probability maps keyed by (step, site), one run direction.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T: Scalar> {
    pub direction: RunDirection,
    pub steps: usize,
    site_ids: Vec<String>,
    site_kinds: HashMap<String, AttnKind>,
    entries: HashMap<(usize, String), Array<T>>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn new(direction: RunDirection, steps: usize, sites: Vec<(String, AttnKind)>) -> Self {
        let site_ids = sites.iter().map(|(s, _)| s.clone()).collect();
        let site_kinds = sites.into_iter().collect();
        Self {
            direction,
            steps,
            site_ids,
            site_kinds,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, step: usize, layer_id: &str, probs: Array<T>) {
        self.entries.insert((step, layer_id.to_string()), probs);
    }

    pub fn get(&self, step: usize, layer_id: &str) -> Option<&Array<T>> {
        self.entries.get(&(step, layer_id.to_string()))
    }

    pub fn kind_of(&self, layer_id: &str) -> Option<AttnKind> {
        self.site_kinds.get(layer_id).copied()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate_complete(&self) -> Result<(), EdmError> {
        for step in 0..self.steps {
            for site in &self.site_ids {
                if !self.entries.contains_key(&(step, site.clone())) {
                    return Err(EdmError::Artifact(ArtifactError::Corrupt {
                        path: "<memory>".into(),
                        detail: format!("trace missing step {step} site {site}"),
                    }));
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xCBF29CE484222325;
        for step in 0..self.steps {
            for site in &self.site_ids {
                if let Some(p) = self.entries.get(&(step, site.clone())) {
                    for &x in p.data() {
                        for b in x.to_f32().to_le_bytes() {
                            h ^= b as u64;
                            h = h.wrapping_mul(0x100000001B3);
                        }
                    }
                }
            }
        }
        h
    }
}

/// Write a trace: magic, version, direction, step count, then per-entry
/// header (step, layer_id, kind, maps, queries, keys) and binary32 payload.
pub fn trace_store_write<T: Scalar>(
    trace: &AttentionTrace<T>,
    path: &Path,
) -> Result<(), ArtifactError> {
    let mut w = BlockWriter::create(path, TRACE_MAGIC, TRACE_VERSION)?;
    w.u32(trace.direction.tag())?;
    w.u32(trace.steps as u32)?;
    for step in 0..trace.steps {
        for site in &trace.site_ids {
            if let Some(p) = trace.entries.get(&(step, site.clone())) {
                let s = p.shape();
                w.u32(step as u32)?;
                w.str(site)?;
                w.u32(trace.site_kinds[site].tag())?;
                w.u32(s[0] as u32)?;
                w.u32(s[1] as u32)?;
                w.u32(s[2] as u32)?;
                w.f32_slice(&p.to_f32_vec())?;
            }
        }
    }
    w.finish()
}

pub fn trace_store_read<T: Scalar>(path: &Path) -> Result<AttentionTrace<T>, ArtifactError> {
    let mut r = BlockReader::open(path, TRACE_MAGIC, TRACE_VERSION)?;
    let direction = RunDirection::from_tag(r.u32()?).ok_or_else(|| ArtifactError::Corrupt {
        path: path.to_path_buf(),
        detail: "bad direction tag".into(),
    })?;
    let steps = r.u32()? as usize;
    let mut sites: Vec<(String, AttnKind)> = Vec::new();
    let mut entries = Vec::new();
    loop {
        let step = match r.try_u32()? {
            Some(v) => v as usize,
            None => break,
        };
        let layer_id = r.str()?;
        let kind = AttnKind::from_tag(r.u32()?).ok_or_else(|| ArtifactError::Corrupt {
            path: path.to_path_buf(),
            detail: "bad kind tag".into(),
        })?;
        let maps = r.u32()? as usize;
        let queries = r.u32()? as usize;
        let keys = r.u32()? as usize;
        let payload = r.f32_vec(maps * queries * keys)?;
        if !sites.iter().any(|(s, _)| s == &layer_id) {
            sites.push((layer_id.clone(), kind));
        }
        entries.push((
            step,
            layer_id,
            Array::<T>::from_f32_slice(&[maps, queries, keys], &payload),
        ));
    }
    let mut trace = AttentionTrace::new(direction, steps, sites);
    for (step, site, p) in entries {
        trace.insert(step, &site, p);
    }
    Ok(trace)
}

/// Records spatial and temporal self-attention probability maps.
pub struct TraceRecorder<T: Scalar> {
    pub trace: AttentionTrace<T>,
}

impl<T: Scalar> TraceRecorder<T> {
    pub fn for_model(model: &Denoiser<T>, direction: RunDirection, steps: usize) -> Self {
        let sites = model
            .self_attention_sites()
            .into_iter()
            .map(|s| (s.layer_id, s.kind))
            .collect();
        Self {
            trace: AttentionTrace::new(direction, steps, sites),
        }
    }
}

impl<T: Scalar> SteppedObserver<T> for TraceRecorder<T> {
    fn on_probs(&mut self, step: usize, site: &SiteInfo, probs: &Array<T>) -> Option<Array<T>> {
        if site.kind != AttnKind::Cross {
            self.trace.insert(step, site.layer_id, probs.clone());
        }
        None
    }
}

fn euler_direction<T: Scalar>(z: &Array<T>, z0_hat: &Array<T>, sigma: f64) -> Array<T> {
    let inv = T::from_f64(1.0 / sigma);
    z.zip(z0_hat, |zi, pi| (zi - pi) * inv)
}

fn model_eval<T: Scalar>(
    model: &Denoiser<T>,
    z: &Array<T>,
    sigma: f64,
    cond: &Conditioning<T>,
    adapters: Option<&AdapterSet<T>>,
    obs: &mut dyn AttentionObserver<T>,
) -> Result<Array<T>, EdmError> {
    let mut tape = Tape::no_grad();
    let bound = match adapters {
        Some(set) => Some(model.bind_adapters(&mut tape, set, None)?),
        None => None,
    };
    let input = ForwardInput {
        z,
        sigma,
        cond_latent: &cond.c_sigma,
        cond_frame: &cond.cond_frame,
    };
    let (out, _) = model.forward(&mut tape, &input, bound.as_ref(), obs)?;
    Ok(tape.value(out).clone())
}

/// Deterministic Euler denoising from sigma_max to 0.
pub fn denoise<T: Scalar>(
    model: &Denoiser<T>,
    z_t: &LatentSeq<T>,
    cond: &Conditioning<T>,
    schedule: &NoiseSchedule,
    adapters: Option<&AdapterSet<T>>,
    observer: &mut dyn SteppedObserver<T>,
) -> Result<LatentSeq<T>, EdmError> {
    let s = schedule.steps();
    if z_t.sigma != schedule.sigma(0) {
        return Err(EdmError::SigmaMismatch {
            got: z_t.sigma,
            want: schedule.sigma(0),
        });
    }
    let mut z = z_t.data.clone();
    for i in 0..s {
        let sigma_i = schedule.sigma(i);
        let sigma_next = if i + 1 < s { schedule.sigma(i + 1) } else { 0.0 };
        let mut adapter = StepAdapter {
            step: i,
            inner: &mut *observer,
        };
        let z0_hat = model_eval(model, &z, sigma_i, cond, adapters, &mut adapter)?;
        let d = euler_direction(&z, &z0_hat, sigma_i);
        let dt = T::from_f64(sigma_next - sigma_i);
        z = z.zip(&d, |zi, di| zi + dt * di);
    }
    Ok(LatentSeq { data: z, sigma: 0.0 })
}

/// Deterministic Euler inversion from clean latents up to sigma_max.
///
/// The walk starts at sigma_{S-1} (the 0 -> sigma_min hop is the identity
/// in this first-order scheme) and finishes with a record-only evaluation
/// at sigma_0 so captures cover every step index.
pub fn invert<T: Scalar>(
    model: &Denoiser<T>,
    z_0: &LatentSeq<T>,
    cond: &Conditioning<T>,
    schedule: &NoiseSchedule,
    adapters: Option<&AdapterSet<T>>,
    observer: &mut dyn SteppedObserver<T>,
) -> Result<LatentSeq<T>, EdmError> {
    if z_0.sigma != 0.0 {
        return Err(EdmError::SigmaMismatch {
            got: z_0.sigma,
            want: 0.0,
        });
    }
    let s = schedule.steps();
    let mut z = z_0.data.clone();
    for i in (1..s).rev() {
        let sigma_i = schedule.sigma(i);
        let sigma_prev = schedule.sigma(i - 1);
        let mut adapter = StepAdapter {
            step: i,
            inner: &mut *observer,
        };
        let z0_hat = model_eval(model, &z, sigma_i, cond, adapters, &mut adapter)?;
        let d = euler_direction(&z, &z0_hat, sigma_i);
        let dt = T::from_f64(sigma_prev - sigma_i);
        z = z.zip(&d, |zi, di| zi + dt * di);
    }
    // Record-only evaluation at the top noise level.
    let mut adapter = StepAdapter {
        step: 0,
        inner: &mut *observer,
    };
    let _ = model_eval(model, &z, schedule.sigma(0), cond, adapters, &mut adapter)?;
    Ok(LatentSeq {
        data: z,
        sigma: schedule.sigma(0),
    })
}

/// Inversion with a captured trace, as the editing pipeline consumes it.
pub fn invert_traced<T: Scalar>(
    model: &Denoiser<T>,
    z_0: &LatentSeq<T>,
    cond: &Conditioning<T>,
    schedule: &NoiseSchedule,
    adapters: Option<&AdapterSet<T>>,
) -> Result<(LatentSeq<T>, AttentionTrace<T>), EdmError> {
    let mut recorder = TraceRecorder::for_model(model, RunDirection::Inversion, schedule.steps());
    let z_t = invert(model, z_0, cond, schedule, adapters, &mut recorder)?;
    Ok((z_t, recorder.trace))
}

/// Denoising with a captured trace.
pub fn denoise_traced<T: Scalar>(
    model: &Denoiser<T>,
    z_t: &LatentSeq<T>,
    cond: &Conditioning<T>,
    schedule: &NoiseSchedule,
    adapters: Option<&AdapterSet<T>>,
) -> Result<(LatentSeq<T>, AttentionTrace<T>), EdmError> {
    let mut recorder = TraceRecorder::for_model(model, RunDirection::Denoising, schedule.steps());
    let z_0 = denoise(model, z_t, cond, schedule, adapters, &mut recorder)?;
    Ok((z_0, recorder.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::media::{Frame, FrameClip};

    fn tiny_model() -> Denoiser<f32> {
        Denoiser::new(
            DenoiserConfig {
                c_lat: 4,
                width: 8,
                heads: 2,
                cond_dim: 8,
                sigma_dim: 8,
                groups: 2,
                sigma_data: 1.0,
            },
            21,
        )
    }

    fn tiny_setup(seed: u64) -> (Denoiser<f32>, Codec<f32>, LatentSeq<f32>, Conditioning<f32>) {
        let model = tiny_model();
        let codec: Codec<f32> = Codec::conv(4, 4);
        let mut rng = RngStream::from_seed(seed);
        let frames: Vec<Frame> = (0..3)
            .map(|_| {
                let data: Vec<f32> = (0..3 * 16 * 16)
                    .map(|_| rng.uniform_in(-0.9, 0.9) as f32)
                    .collect();
                Frame::new(16, 16, data)
            })
            .collect();
        let clip = FrameClip {
            frames,
            clip_index: 1,
            first_frame_is_condition: true,
        };
        let z0 = codec.encode(&clip).unwrap();
        let cond = make_conditioning(&codec, &clip.frames[0], 0.02, seed, "test").unwrap();
        (model, codec, z0, cond)
    }

    #[test]
    fn schedule_formula_and_endpoints() {
        let sch = build_schedule(25, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(sch.sigma(0), 80.0);
        let last = sch.sigma(24);
        assert!((last - 0.002).abs() < 1e-12, "sigma_min endpoint {last}");
        for i in 1..25 {
            assert!(sch.sigma(i) < sch.sigma(i - 1), "not strictly decreasing");
        }
        // Closed-form midpoint check.
        let i = 7usize;
        let t = i as f64 / 24.0;
        let want = (80f64.powf(1.0 / 7.0) + t * (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0)))
            .powf(7.0);
        assert!((sch.sigma(i) - want).abs() < 1e-12);
    }

    #[test]
    fn two_step_schedule_is_endpoints_only() {
        let sch = build_schedule(2, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(sch.sigmas().len(), 2);
        assert_eq!(sch.sigma(0), 80.0);
        assert!((sch.sigma(1) - 0.002).abs() < 1e-12);
    }

    #[test]
    fn invalid_schedules_error() {
        assert!(matches!(
            build_schedule(1, 0.002, 80.0, 7.0),
            Err(EdmError::TooFewSteps(1))
        ));
        assert!(matches!(
            build_schedule(10, 0.0, 80.0, 7.0),
            Err(EdmError::InvalidBounds { .. })
        ));
        assert!(matches!(
            build_schedule(10, 80.0, 0.002, 7.0),
            Err(EdmError::InvalidBounds { .. })
        ));
    }

    #[test]
    fn zero_denoiser_inversion_scales_linearly() {
        // A freshly initialized model has a zero-initialized output head, so
        // z0_hat is identically zero and the flow is dz/dsigma = z/sigma.
        let (model, _codec, z0, cond) = tiny_setup(3);
        let sch = build_schedule(12, 0.002, 80.0, 7.0).unwrap();
        let z_t = invert(&model, &z0, &cond, &sch, None, &mut NoStepObserver).unwrap();
        let factor = sch.sigma(0) / sch.sigma(sch.steps() - 1);
        let mut max_rel = 0.0f64;
        for (a, b) in z_t.data.data().iter().zip(z0.data.data().iter()) {
            let want = *b as f64 * factor;
            if want.abs() > 1e-6 {
                max_rel = max_rel.max((*a as f64 - want).abs() / want.abs());
            }
        }
        assert!(max_rel < 1e-4, "max relative deviation {max_rel}");
        assert_eq!(z_t.sigma, sch.sigma(0));
    }

    #[test]
    fn perfect_oracle_single_step_denoise_returns_target() {
        // With sigma -> 0 in one Euler step and an exact prediction, the
        // update lands exactly on z0_hat. The zero model predicts zero, so
        // the terminal state is exactly zero.
        let (model, _codec, z0, cond) = tiny_setup(5);
        let sch = build_schedule(2, 0.002, 80.0, 7.0).unwrap();
        let z_t = LatentSeq {
            data: z0.data.clone(),
            sigma: sch.sigma(0),
        };
        let out = denoise(&model, &z_t, &cond, &sch, None, &mut NoStepObserver).unwrap();
        // Last step: z + (0 - sigma) * (z - 0)/sigma = 0 exactly.
        assert!(out.data.data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn sigma_preconditions_are_enforced() {
        let (model, _codec, z0, cond) = tiny_setup(6);
        let sch = build_schedule(4, 0.002, 80.0, 7.0).unwrap();
        let wrong = LatentSeq {
            data: z0.data.clone(),
            sigma: 1.0,
        };
        assert!(matches!(
            denoise(&model, &wrong, &cond, &sch, None, &mut NoStepObserver),
            Err(EdmError::SigmaMismatch { .. })
        ));
        assert!(matches!(
            invert(&model, &wrong, &cond, &sch, None, &mut NoStepObserver),
            Err(EdmError::SigmaMismatch { .. })
        ));
    }

    #[test]
    fn runs_are_deterministic_and_capture_is_neutral() {
        let (model, _codec, z0, cond) = tiny_setup(7);
        let sch = build_schedule(5, 0.002, 80.0, 7.0).unwrap();

        let plain = invert(&model, &z0, &cond, &sch, None, &mut NoStepObserver).unwrap();
        let again = invert(&model, &z0, &cond, &sch, None, &mut NoStepObserver).unwrap();
        assert_eq!(plain.data.data(), again.data.data());

        let (traced, trace) = invert_traced(&model, &z0, &cond, &sch, None).unwrap();
        assert_eq!(
            plain.data.data(),
            traced.data.data(),
            "trace capture changed numerics"
        );
        trace.validate_complete().unwrap();
        assert_eq!(trace.len(), sch.steps() * 10); // 5 blocks x 2 self-attn kinds
    }

    #[test]
    fn trace_file_round_trips_and_detects_truncation() {
        let dir = std::env::temp_dir().join("ff_edm_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.bin");

        let (model, _codec, z0, cond) = tiny_setup(8);
        let sch = build_schedule(3, 0.002, 80.0, 7.0).unwrap();
        let (_zt, trace) = invert_traced(&model, &z0, &cond, &sch, None).unwrap();
        trace_store_write(&trace, &path).unwrap();
        let back: AttentionTrace<f32> = trace_store_read(&path).unwrap();
        assert_eq!(back.digest(), trace.digest());
        assert_eq!(back.direction, RunDirection::Inversion);
        assert_eq!(back.steps, trace.steps);

        // File size equals header plus declared payloads exactly.
        let meta = std::fs::metadata(&path).unwrap();
        let mut expected = (TRACE_MAGIC.len() + 4 + 4 + 4) as u64;
        for step in 0..trace.steps {
            for site in trace.site_ids() {
                let p = trace.get(step, site).unwrap();
                expected += 4 + 4 + site.len() as u64 + 4 + 12 + 4 * p.numel() as u64;
            }
        }
        assert_eq!(meta.len(), expected);

        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        assert!(matches!(
            trace_store_read::<f32>(&path),
            Err(ArtifactError::Truncated { .. })
        ));
    }

    #[test]
    fn stacked_observer_chains_probability_replacements() {
        struct Doubler;
        impl SteppedObserver<f32> for Doubler {
            fn on_probs(
                &mut self,
                _step: usize,
                _site: &SiteInfo,
                probs: &Array<f32>,
            ) -> Option<Array<f32>> {
                Some(probs.map(|v| v * 2.0))
            }
        }
        struct Checker {
            saw_doubled: bool,
        }
        impl SteppedObserver<f32> for Checker {
            fn on_probs(
                &mut self,
                _step: usize,
                _site: &SiteInfo,
                probs: &Array<f32>,
            ) -> Option<Array<f32>> {
                let sum: f32 = probs.data().iter().take(4).sum();
                if sum > 1.5 {
                    self.saw_doubled = true;
                }
                None
            }
        }
        let mut doubler = Doubler;
        let mut checker = Checker { saw_doubled: false };
        let mut multi = MultiObserver {
            layers: vec![&mut doubler as &mut dyn SteppedObserver<f32>, &mut checker],
        };
        let mut stack = StepAdapter {
            step: 0,
            inner: &mut multi,
        };
        let site = SiteInfo {
            layer_id: "x.spatial",
            kind: AttnKind::Spatial,
            downscale_factor: 1,
            heads: 1,
        };
        let probs: Array<f32> = Array::new(vec![1, 2, 2], vec![0.5, 0.5, 0.9, 0.1]);
        let out = AttentionObserver::on_probs(&mut stack, &site, &probs).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.8, 0.2]);
        assert!(checker.saw_doubled);
    }
}
