//! Skip-interval reuse of clip-1 temporal-attention key/values.
//!
//! During clip 1's anchor run (inversion at training time, denoising at
//! inference time) every temporal self-attention site contributes its
//! post-projection K/V at every step. Later clips concatenate those rows
//! along the key axis, widening the softmax so each token can also attend
//! into clip 1. Cached rows are stored as materialized in clip 1's run and
//! are not re-projected by later clips' adapters.

use std::collections::HashMap;
use std::path::Path;

use firstframe_tensor::{Array, Scalar};

use crate::artifact::{BlockReader, BlockWriter};
use crate::denoiser::{AttentionObserver, AttnKind, SiteInfo};
use crate::error::{ArtifactError, SkipError};
use crate::kernels_ext::attention_dense;

const KV_MAGIC: &[u8] = b"FFKVCH01";
const KV_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunDirection {
    Inversion,
    Denoising,
}

impl RunDirection {
    pub fn tag(&self) -> u32 {
        match self {
            Self::Inversion => 0,
            Self::Denoising => 1,
        }
    }

    pub fn from_tag(t: u32) -> Option<Self> {
        match t {
            0 => Some(Self::Inversion),
            1 => Some(Self::Denoising),
            _ => None,
        }
    }
}

/// Per-(step, temporal site) key/value matrices from clip 1.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar> {
    pub source_run: RunDirection,
    pub steps: usize,
    /// Noise level at which the model was evaluated for each step index.
    pub eval_sigmas: Vec<f64>,
    site_ids: Vec<String>,
    entries: HashMap<(usize, String), (Array<T>, Array<T>)>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(source_run: RunDirection, eval_sigmas: Vec<f64>, site_ids: Vec<String>) -> Self {
        Self {
            source_run,
            steps: eval_sigmas.len(),
            eval_sigmas,
            site_ids,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, step: usize, layer_id: &str, k: Array<T>, v: Array<T>) {
        self.entries.insert((step, layer_id.to_string()), (k, v));
    }

    pub fn get(&self, step: usize, layer_id: &str) -> Option<&(Array<T>, Array<T>)> {
        self.entries.get(&(step, layer_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    /// Every temporal site must have exactly one entry per step.
    pub fn validate_complete(&self) -> Result<(), SkipError> {
        for step in 0..self.steps {
            for site in &self.site_ids {
                if !self.entries.contains_key(&(step, site.clone())) {
                    return Err(SkipError::Incomplete {
                        step,
                        layer_id: site.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Step whose evaluation noise level is closest to `sigma`; ties take
    /// the lower index.
    pub fn nearest_step_for_sigma(&self, sigma: f64) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &s) in self.eval_sigmas.iter().enumerate() {
            let d = (s - sigma).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn digest(&self) -> u64 {
        // Deterministic order: steps then site order.
        let mut h: u64 = 0xCBF29CE484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001B3);
            }
        };
        for step in 0..self.steps {
            for site in &self.site_ids {
                if let Some((k, v)) = self.entries.get(&(step, site.clone())) {
                    for &x in k.data().iter().chain(v.data().iter()) {
                        mix(&x.to_f32().to_le_bytes());
                    }
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let mut w = BlockWriter::create(path, KV_MAGIC, KV_VERSION)?;
        w.u32(self.source_run.tag())?;
        w.u32(self.steps as u32)?;
        for &s in &self.eval_sigmas {
            w.u64(s.to_bits())?;
        }
        w.u32(self.site_ids.len() as u32)?;
        for site in &self.site_ids {
            w.str(site)?;
        }
        w.u32(self.entries.len() as u32)?;
        for step in 0..self.steps {
            for site in &self.site_ids {
                if let Some((k, v)) = self.entries.get(&(step, site.clone())) {
                    w.u32(step as u32)?;
                    w.str(site)?;
                    w.u32(AttnKind::Temporal.tag())?;
                    w.array("k", k)?;
                    w.array("v", v)?;
                }
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let mut r = BlockReader::open(path, KV_MAGIC, KV_VERSION)?;
        let direction =
            RunDirection::from_tag(r.u32()?).ok_or_else(|| ArtifactError::Corrupt {
                path: path.to_path_buf(),
                detail: "bad direction tag".into(),
            })?;
        let steps = r.u32()? as usize;
        let mut eval_sigmas = Vec::with_capacity(steps);
        for _ in 0..steps {
            eval_sigmas.push(f64::from_bits(r.u64()?));
        }
        let n_sites = r.u32()? as usize;
        let mut site_ids = Vec::with_capacity(n_sites);
        for _ in 0..n_sites {
            site_ids.push(r.str()?);
        }
        let n_entries = r.u32()? as usize;
        let mut cache = Self::new(direction, eval_sigmas, site_ids);
        for _ in 0..n_entries {
            let step = r.u32()? as usize;
            let site = r.str()?;
            let kind = r.u32()?;
            if kind != AttnKind::Temporal.tag() {
                return Err(ArtifactError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("cache entry with non-temporal kind {kind}"),
                });
            }
            let (kn, k) = r.array::<T>()?;
            let (vn, v) = r.array::<T>()?;
            if kn != "k" || vn != "v" {
                return Err(ArtifactError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("expected k/v payloads, got {kn}/{vn}"),
                });
            }
            cache.insert(step, &site, k, v);
        }
        r.expect_eof()?;
        Ok(cache)
    }
}

/// Records temporal K/V during an anchor run. Observation only; never
/// perturbs the run.
pub struct KvCapture<T: Scalar> {
    pub cache: KvCache<T>,
}

impl<T: Scalar> KvCapture<T> {
    pub fn new(source_run: RunDirection, eval_sigmas: Vec<f64>, site_ids: Vec<String>) -> Self {
        Self {
            cache: KvCache::new(source_run, eval_sigmas, site_ids),
        }
    }
}

impl<T: Scalar> crate::edm::SteppedObserver<T> for KvCapture<T> {
    fn on_kv(&mut self, step: usize, site: &SiteInfo, k: &Array<T>, v: &Array<T>) {
        if site.kind == AttnKind::Temporal {
            self.cache.insert(step, site.layer_id, k.clone(), v.clone());
        }
    }
}

/// Injects cached K/V into temporal attention for a single forward pass at
/// a fixed cache step (training pairs each step with the nearest noise
/// level).
pub struct SkipInjector<'c, T: Scalar> {
    cache: &'c KvCache<T>,
    step: usize,
}

impl<'c, T: Scalar> SkipInjector<'c, T> {
    pub fn for_step(cache: &'c KvCache<T>, step: usize) -> Self {
        Self { cache, step }
    }

    pub fn for_sigma(cache: &'c KvCache<T>, sigma: f64) -> Self {
        let step = cache.nearest_step_for_sigma(sigma);
        Self { cache, step }
    }
}

impl<T: Scalar> AttentionObserver<T> for SkipInjector<'_, T> {
    fn extra_kv(&mut self, site: &SiteInfo) -> Option<(Array<T>, Array<T>)> {
        if site.kind != AttnKind::Temporal {
            return None;
        }
        self.cache
            .get(self.step, site.layer_id)
            .map(|(k, v)| (k.clone(), v.clone()))
    }
}

/// Step-aligned injector for sampling runs: the consumer's step t uses the
/// cache's step t. Schedules of different lengths are rejected up front.
pub struct SkipStepInjector<'c, T: Scalar> {
    cache: &'c KvCache<T>,
}

impl<'c, T: Scalar> SkipStepInjector<'c, T> {
    pub fn new(cache: &'c KvCache<T>, run_steps: usize) -> Result<Self, SkipError> {
        if cache.steps != run_steps {
            return Err(SkipError::StepCountMismatch {
                cache_steps: cache.steps,
                run_steps,
            });
        }
        cache.validate_complete()?;
        Ok(Self { cache })
    }
}

impl<T: Scalar> crate::edm::SteppedObserver<T> for SkipStepInjector<'_, T> {
    fn extra_kv(&mut self, step: usize, site: &SiteInfo) -> Option<(Array<T>, Array<T>)> {
        if site.kind != AttnKind::Temporal {
            return None;
        }
        self.cache
            .get(step, site.layer_id)
            .map(|(k, v)| (k.clone(), v.clone()))
    }
}

/// Widened attention over plain matrices: keys/values of the current clip
/// concatenated with cached rows, one softmax across the widened row.
pub fn skip_attention<T: Scalar>(
    q: &Array<T>,
    k: &Array<T>,
    v: &Array<T>,
    cached: (&Array<T>, &Array<T>),
    scale: f64,
) -> Result<Array<T>, SkipError> {
    let (ck, cv) = cached;
    let dims_ok = k.shape().len() == 2
        && ck.shape().len() == 2
        && v.shape().len() == 2
        && cv.shape().len() == 2
        && (ck.shape()[0] == 0 || ck.shape()[1] == k.shape()[1])
        && (cv.shape()[0] == 0 || cv.shape()[1] == v.shape()[1])
        && ck.shape()[0] == cv.shape()[0];
    if !dims_ok {
        return Err(SkipError::DimMismatch {
            cached: ck.shape().to_vec(),
            current: k.shape().to_vec(),
        });
    }
    let (tk, d) = (k.shape()[0], k.shape()[1]);
    let (tc, dv) = (ck.shape()[0], v.shape()[1]);
    let mut k_wide = Vec::with_capacity((tk + tc) * d);
    k_wide.extend_from_slice(k.data());
    k_wide.extend_from_slice(ck.data());
    let mut v_wide = Vec::with_capacity((tk + tc) * dv);
    v_wide.extend_from_slice(v.data());
    v_wide.extend_from_slice(cv.data());
    let kw = Array::new(vec![tk + tc, d], k_wide);
    let vw = Array::new(vec![tk + tc, dv], v_wide);
    attention_dense(q, &kw, &vw, scale).map_err(|_| SkipError::DimMismatch {
        cached: ck.shape().to_vec(),
        current: q.shape().to_vec(),
    })
}
