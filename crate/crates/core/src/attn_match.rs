//! Fine-grained attention matching for the editing denoise run.
//!
//! Spatial self-attention: per (map, query) the structural difference
//! between edit-run and source-run probability rows is half their L1
//! distance, which lands in [0,1] for stochastic rows. Rows whose
//! difference exceeds `thr` keep the edit attention outright; the rest mix
//! edit and source proportionally to the difference, so unedited structure
//! stays pinned to the source.
//!
//! Temporal self-attention: a three-stage step policy. Early steps replace
//! source maps everywhere, mid steps replace only coarse-resolution sites,
//! late steps keep the edit maps to preserve fine detail.

use firstframe_tensor::{Array, Scalar};

use crate::denoiser::{AttentionSite, AttnKind, SiteInfo};
use crate::edm::{AttentionTrace, SteppedObserver};
use crate::error::MatchError;

pub const DEFAULT_THR: f64 = 0.35;
pub const DEFAULT_DOWNSCALE_CUTOFF: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditPreset {
    /// Object-level local edits.
    Local,
    /// Global style transfer without dramatic shape change.
    Style,
    /// Edits with significant shape changes.
    Shape,
}

impl EditPreset {
    pub fn betas(&self) -> (f64, f64) {
        match self {
            Self::Local => (0.5, 0.8),
            Self::Style => (0.8, 0.9),
            Self::Shape => (0.4, 0.5),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "local" => Some(Self::Local),
            "style" => Some(Self::Style),
            "shape" => Some(Self::Shape),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Style => "style",
            Self::Shape => "shape",
        }
    }
}

/// Editing knobs for one appearance-refinement run.
#[derive(Debug, Clone)]
pub struct EditRunConfig {
    pub thr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub downscale_cutoff: usize,
    pub preset: EditPreset,
    pub steps: usize,
    pub seed: u64,
    /// Disable all rectification (pure edit path).
    pub matching_enabled: bool,
    /// Average difference maps across heads before thresholding.
    pub head_averaged: bool,
}

impl EditRunConfig {
    pub fn from_preset(preset: EditPreset) -> Self {
        let (beta1, beta2) = preset.betas();
        Self {
            thr: DEFAULT_THR,
            beta1,
            beta2,
            downscale_cutoff: DEFAULT_DOWNSCALE_CUTOFF,
            preset,
            steps: crate::edm::DEFAULT_STEPS,
            seed: 0,
            matching_enabled: true,
            head_averaged: false,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let ok = (0.0..=1.0).contains(&self.thr)
            && (0.0..=1.0).contains(&self.beta1)
            && (0.0..=1.0).contains(&self.beta2)
            && self.beta1 <= self.beta2;
        if ok {
            Ok(())
        } else {
            Err(MatchError::ShapeMismatch {
                a: vec![],
                b: vec![],
            })
        }
    }
}

impl Default for EditRunConfig {
    fn default() -> Self {
        Self::from_preset(EditPreset::Local)
    }
}

/// Per (map, query) structural difference in [0,1] for stochastic rows.
#[derive(Debug, Clone)]
pub struct DiffMap {
    pub maps: usize,
    pub queries: usize,
    values: Vec<f64>,
}

impl DiffMap {
    #[inline]
    pub fn get(&self, map: usize, query: usize) -> f64 {
        self.values[map * self.queries + query]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Half the per-row L1 distance between two attention maps `[maps, q, k]`.
pub fn spatial_diff<T: Scalar>(
    a_src: &Array<T>,
    a_edit: &Array<T>,
) -> Result<DiffMap, MatchError> {
    if a_src.shape() != a_edit.shape() || a_src.shape().len() != 3 {
        return Err(MatchError::ShapeMismatch {
            a: a_src.shape().to_vec(),
            b: a_edit.shape().to_vec(),
        });
    }
    let (maps, queries, keys) = (a_src.shape()[0], a_src.shape()[1], a_src.shape()[2]);
    let mut values = Vec::with_capacity(maps * queries);
    for row in 0..maps * queries {
        let s = &a_src.data()[row * keys..(row + 1) * keys];
        let e = &a_edit.data()[row * keys..(row + 1) * keys];
        let mut acc = 0.0f64;
        for (&sv, &ev) in s.iter().zip(e.iter()) {
            acc += (ev.to_f64() - sv.to_f64()).abs();
        }
        values.push(acc / 2.0);
    }
    Ok(DiffMap {
        maps,
        queries,
        values,
    })
}

/// Average a difference map across the `heads` maps of each batch group.
pub fn head_average(diff: &DiffMap, heads: usize) -> DiffMap {
    assert_eq!(diff.maps % heads, 0, "maps must divide by heads");
    let groups = diff.maps / heads;
    let mut values = vec![0.0f64; diff.maps * diff.queries];
    for g in 0..groups {
        for q in 0..diff.queries {
            let mut acc = 0.0;
            for h in 0..heads {
                acc += diff.get(g * heads + h, q);
            }
            let avg = acc / heads as f64;
            for h in 0..heads {
                values[(g * heads + h) * diff.queries + q] = avg;
            }
        }
    }
    DiffMap {
        maps: diff.maps,
        queries: diff.queries,
        values,
    }
}

/// Weighted attention: rows whose difference exceeds `thr` take the edit
/// map whole; the rest mix `diff * edit + (1 - diff) * src` per row.
pub fn spatial_match<T: Scalar>(
    a_src: &Array<T>,
    a_edit: &Array<T>,
    thr: f64,
    head_averaged: Option<usize>,
) -> Result<Array<T>, MatchError> {
    let diff = spatial_diff(a_src, a_edit)?;
    let diff = match head_averaged {
        Some(heads) => head_average(&diff, heads),
        None => diff,
    };
    let keys = a_src.shape()[2];
    let mut out = vec![T::ZERO; a_src.numel()];
    for row in 0..diff.maps * diff.queries {
        let d = diff.values[row];
        let m = if d > thr { 1.0 } else { d };
        let mt = T::from_f64(m);
        let one_mt = T::from_f64(1.0 - m);
        let s = &a_src.data()[row * keys..(row + 1) * keys];
        let e = &a_edit.data()[row * keys..(row + 1) * keys];
        let o = &mut out[row * keys..(row + 1) * keys];
        for ((ov, &ev), &sv) in o.iter_mut().zip(e.iter()).zip(s.iter()) {
            *ov = mt * ev + one_mt * sv;
        }
    }
    Ok(Array::new(a_src.shape().to_vec(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectAction {
    Replace,
    Keep,
}

/// Three-stage temporal policy on progress p = step/steps over half-open
/// stages [0, beta1), [beta1, beta2), [beta2, 1].
pub fn temporal_select(
    step: usize,
    steps: usize,
    site: &AttentionSite,
    cfg: &EditRunConfig,
) -> SelectAction {
    let p = step as f64 / steps as f64;
    if p < cfg.beta1 {
        SelectAction::Replace
    } else if p < cfg.beta2 {
        if site.downscale_factor >= cfg.downscale_cutoff {
            SelectAction::Replace
        } else {
            SelectAction::Keep
        }
    } else {
        SelectAction::Keep
    }
}

/// Controller rectifying the edit run's self-attention against a source
/// trace. Spatial sites mix via difference maps; temporal sites obey the
/// stage selector; cross-attention passes through untouched.
pub struct MatchController<'t, T: Scalar> {
    trace: &'t AttentionTrace<T>,
    cfg: EditRunConfig,
}

/// Validate step alignment and completeness over the run's instrumented
/// sites, then build the controller.
pub fn make_controllers<'t, T: Scalar>(
    src_trace: &'t AttentionTrace<T>,
    cfg: &EditRunConfig,
    run_steps: usize,
    run_sites: &[AttentionSite],
) -> Result<MatchController<'t, T>, MatchError> {
    cfg.validate()?;
    if src_trace.steps != run_steps {
        return Err(MatchError::TraceMisaligned {
            trace_steps: src_trace.steps,
            run_steps,
        });
    }
    for step in 0..src_trace.steps {
        for site in run_sites.iter().filter(|s| s.kind != AttnKind::Cross) {
            if src_trace.get(step, &site.layer_id).is_none() {
                return Err(MatchError::TraceIncomplete {
                    step,
                    layer_id: site.layer_id.clone(),
                });
            }
        }
    }
    Ok(MatchController {
        trace: src_trace,
        cfg: cfg.clone(),
    })
}

impl<T: Scalar> SteppedObserver<T> for MatchController<'_, T> {
    fn on_probs(&mut self, step: usize, site: &SiteInfo, probs: &Array<T>) -> Option<Array<T>> {
        if !self.cfg.matching_enabled {
            return None;
        }
        match site.kind {
            AttnKind::Cross => None,
            AttnKind::Spatial => {
                let src = self
                    .trace
                    .get(step, site.layer_id)
                    .expect("trace validated complete");
                if src.shape() != probs.shape() {
                    // Shape drift between source and edit runs is fatal at the
                    // pipeline level; surfaced by returning a mismatched map.
                    return Some(src.clone());
                }
                let averaged = self.cfg.head_averaged.then_some(site.heads);
                Some(
                    spatial_match(src, probs, self.cfg.thr, averaged)
                        .expect("shapes checked above"),
                )
            }
            AttnKind::Temporal => {
                let catalog_site = AttentionSite {
                    layer_id: site.layer_id.to_string(),
                    kind: site.kind,
                    downscale_factor: site.downscale_factor,
                    head_count: site.heads,
                };
                match temporal_select(step, self.cfg.steps, &catalog_site, &self.cfg) {
                    SelectAction::Replace => {
                        let src = self
                            .trace
                            .get(step, site.layer_id)
                            .expect("trace validated complete");
                        Some(src.clone())
                    }
                    SelectAction::Keep => None,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use firstframe_tensor::RngStream;

    fn stochastic_map(rng: &mut RngStream, maps: usize, q: usize, k: usize) -> Array<f64> {
        let mut data = Vec::with_capacity(maps * q * k);
        for _ in 0..maps * q {
            let mut row: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-6).collect();
            let s: f64 = row.iter().sum();
            for v in &mut row {
                *v /= s;
            }
            data.extend(row);
        }
        Array::new(vec![maps, q, k], data)
    }

    #[test]
    fn identical_maps_have_zero_diff() {
        let mut rng = RngStream::from_seed(1);
        let a = stochastic_map(&mut rng, 2, 3, 5);
        let d = spatial_diff(&a, &a).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disjoint_one_hot_rows_have_diff_one() {
        let a: Array<f64> = Array::new(vec![1, 1, 2], vec![1.0, 0.0]);
        let b: Array<f64> = Array::new(vec![1, 1, 2], vec![0.0, 1.0]);
        let d = spatial_diff(&a, &b).unwrap();
        assert_eq!(d.get(0, 0), 1.0);
    }

    #[test]
    fn diff_matches_brute_force_and_stays_in_range() {
        let mut rng = RngStream::from_seed(2);
        for _ in 0..50 {
            let (m, q, k) = (1 + rng.below(3), 1 + rng.below(4), 2 + rng.below(6));
            let a = stochastic_map(&mut rng, m, q, k);
            let b = stochastic_map(&mut rng, m, q, k);
            let d = spatial_diff(&a, &b).unwrap();
            for mi in 0..m {
                for qi in 0..q {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        let idx = (mi * q + qi) * k + ki;
                        acc += (b.data()[idx] - a.data()[idx]).abs();
                    }
                    let want = acc / 2.0;
                    let got = d.get(mi, qi);
                    assert!((got - want).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&got));
                }
            }
        }
    }

    #[test]
    fn match_branches_follow_the_threshold() {
        // One row with diff 0.5 (> thr) and one with diff 0.2 (<= thr).
        let a_src: Array<f64> = Array::new(
            vec![1, 2, 2],
            vec![1.0, 0.0, /* row 2 */ 0.9, 0.1],
        );
        let a_edit: Array<f64> = Array::new(
            vec![1, 2, 2],
            vec![0.5, 0.5, /* row 2 */ 0.7, 0.3],
        );
        let out = spatial_match(&a_src, &a_edit, 0.35, None).unwrap();
        // Row 1: diff = (0.5 + 0.5)/2 = 0.5 > 0.35 -> edit row kept whole.
        assert_eq!(&out.data()[0..2], &[0.5, 0.5]);
        // Row 2: diff = (0.2 + 0.2)/2 = 0.2 -> 0.2*edit + 0.8*src.
        let want0 = 0.2 * 0.7 + 0.8 * 0.9;
        let want1 = 0.2 * 0.3 + 0.8 * 0.1;
        assert!((out.data()[2] - want0).abs() < 1e-12);
        assert!((out.data()[3] - want1).abs() < 1e-12);
        // Mixed rows stay stochastic.
        assert!((out.data()[2] + out.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_rows_return_source() {
        let mut rng = RngStream::from_seed(3);
        let a = stochastic_map(&mut rng, 2, 2, 4);
        let out = spatial_match(&a, &a, 0.35, None).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn rows_stay_stochastic_and_influence_is_monotone_in_thr() {
        let mut rng = RngStream::from_seed(4);
        for _ in 0..20 {
            let a = stochastic_map(&mut rng, 2, 3, 6);
            let b = stochastic_map(&mut rng, 2, 3, 6);
            let mut prev_dist = f64::INFINITY;
            for thr in [0.0, 0.35, 1.0] {
                let out = spatial_match(&a, &b, thr, None).unwrap();
                for row in 0..6 {
                    let s: f64 = out.data()[row * 6..(row + 1) * 6].iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
                let dist: f64 = out
                    .data()
                    .iter()
                    .zip(a.data().iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(
                    dist <= prev_dist + 1e-12,
                    "distance to source must weakly decrease as thr rises"
                );
                prev_dist = dist;
            }
        }
    }

    #[test]
    fn thr_zero_keeps_edit_maps() {
        // diff > 0 everywhere means M = 1 everywhere; rows with diff = 0 are
        // already identical, so thr = 0 reproduces the edit map exactly.
        let mut rng = RngStream::from_seed(5);
        let a = stochastic_map(&mut rng, 1, 2, 4);
        let b = stochastic_map(&mut rng, 1, 2, 4);
        let out = spatial_match(&a, &b, 0.0, None).unwrap();
        assert_eq!(out.data(), b.data());
    }

    fn site(ds: usize) -> AttentionSite {
        AttentionSite {
            layer_id: format!("ds{ds}.temporal"),
            kind: AttnKind::Temporal,
            downscale_factor: ds,
            head_count: 4,
        }
    }

    #[test]
    fn selector_examples_from_presets() {
        let cfg = EditRunConfig::from_preset(EditPreset::Local);
        // s=10 of 25: p = 0.4 < 0.5 -> replace at every site.
        assert_eq!(temporal_select(10, 25, &site(1), &cfg), SelectAction::Replace);
        assert_eq!(temporal_select(10, 25, &site(4), &cfg), SelectAction::Replace);
        // s=15: p = 0.6 in [0.5, 0.8) -> only coarse sites.
        assert_eq!(temporal_select(15, 25, &site(2), &cfg), SelectAction::Keep);
        assert_eq!(temporal_select(15, 25, &site(4), &cfg), SelectAction::Replace);
        // s=24: p = 0.96 >= beta2 for every preset.
        for preset in [EditPreset::Local, EditPreset::Style, EditPreset::Shape] {
            let cfg = EditRunConfig::from_preset(preset);
            assert_eq!(temporal_select(24, 25, &site(4), &cfg), SelectAction::Keep);
        }
    }

    #[test]
    fn exactly_one_stage_fires_for_every_step() {
        for preset in [EditPreset::Local, EditPreset::Style, EditPreset::Shape] {
            let cfg = EditRunConfig::from_preset(preset);
            for s in 0..25 {
                let p = s as f64 / 25.0;
                let stage1 = p < cfg.beta1;
                let stage2 = !stage1 && p < cfg.beta2;
                let stage3 = !stage1 && !stage2;
                assert_eq!(
                    u8::from(stage1) + u8::from(stage2) + u8::from(stage3),
                    1,
                    "stages must partition"
                );
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a: Array<f64> = Array::zeros(&[1, 2, 3]);
        let b: Array<f64> = Array::zeros(&[1, 2, 4]);
        assert!(matches!(
            spatial_diff(&a, &b),
            Err(MatchError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn head_averaging_pools_across_heads() {
        let d = DiffMap {
            maps: 4,
            queries: 1,
            values: vec![0.0, 1.0, 0.5, 0.5],
        };
        let avg = head_average(&d, 2);
        assert_eq!(avg.get(0, 0), 0.5);
        assert_eq!(avg.get(1, 0), 0.5);
        assert_eq!(avg.get(2, 0), 0.5);
        assert_eq!(avg.get(3, 0), 0.5);
    }
}
