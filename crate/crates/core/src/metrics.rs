//! Quantitative metrics: temporal consistency via a fixed random-projection
//! patch featurizer, and trajectory error against synthetic ground truth.

use firstframe_tensor::RngStream;

use crate::error::MetricsError;
use crate::media::Frame;

const PATCH_GRID: usize = 8;
const FEATURE_DIM: usize = 192;

/// Linear frame featurizer: per-channel mean pooling over a fixed patch
/// grid followed by a seeded random projection. Linearity makes the
/// features sign-equivariant and the metric deterministic given the seed.
pub struct Featurizer {
    projection: Vec<f64>, // [FEATURE_DIM, 3 * P * P]
    grid: usize,
}

impl Featurizer {
    pub fn new(seed: u64) -> Self {
        let mut rng = RngStream::derive(seed, "metrics.featurizer");
        let in_dim = 3 * PATCH_GRID * PATCH_GRID;
        let scale = 1.0 / (in_dim as f64).sqrt();
        let projection = (0..FEATURE_DIM * in_dim)
            .map(|_| rng.normal() * scale)
            .collect();
        Self {
            projection,
            grid: PATCH_GRID,
        }
    }

    pub fn features(&self, frame: &Frame) -> Vec<f64> {
        let g = self.grid.min(frame.height).min(frame.width);
        let mut pooled = vec![0.0f64; 3 * self.grid * self.grid];
        for c in 0..3 {
            for py in 0..g {
                for px in 0..g {
                    let y0 = py * frame.height / g;
                    let y1 = ((py + 1) * frame.height / g).max(y0 + 1);
                    let x0 = px * frame.width / g;
                    let x1 = ((px + 1) * frame.width / g).max(x0 + 1);
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += frame.get(c, y, x) as f64;
                        }
                    }
                    pooled[(c * self.grid + py) * self.grid + px] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let in_dim = pooled.len();
        (0..FEATURE_DIM)
            .map(|i| {
                let row = &self.projection[i * in_dim..(i + 1) * in_dim];
                row.iter().zip(pooled.iter()).map(|(r, p)| r * p).sum()
            })
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of adjacent-frame features, in [-1, 1].
pub fn temporal_consistency(frames: &[Frame], seed: u64) -> Result<f64, MetricsError> {
    if frames.len() < 2 {
        return Err(MetricsError::TooFewFrames(frames.len()));
    }
    let featurizer = Featurizer::new(seed);
    let feats: Vec<Vec<f64>> = frames.iter().map(|f| featurizer.features(f)).collect();
    let mut sims: Vec<f64> = feats.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
    // Canonical summation order keeps the mean exactly reversal-invariant.
    sims.sort_by(f64::total_cmp);
    Ok(sims.iter().sum::<f64>() / (frames.len() - 1) as f64)
}

/// 1 - cosine similarity of two frames' features; the drift measure.
pub fn feature_distance(a: &Frame, b: &Frame, seed: u64) -> f64 {
    let featurizer = Featurizer::new(seed);
    1.0 - cosine(&featurizer.features(a), &featurizer.features(b))
}

/// Foreground centroid by background-color keying, pixel-center coords.
pub fn frame_centroid(
    frame: &Frame,
    background: [f32; 3],
    tol: f32,
) -> Option<(f64, f64)> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0.0;
    for y in 0..frame.height {
        for x in 0..frame.width {
            let fg = (0..3).any(|c| (frame.get(c, y, x) - background[c]).abs() > tol);
            if fg {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        None
    } else {
        Some((sx / n, sy / n))
    }
}

/// Mean Euclidean distance between per-frame keyed centroids and a
/// ground-truth track, in pixels.
pub fn trajectory_error(
    frames: &[Frame],
    track: &[(f64, f64)],
    background: [f32; 3],
    tol: f32,
) -> Result<f64, MetricsError> {
    if frames.len() != track.len() {
        return Err(MetricsError::TrackLengthMismatch {
            track: track.len(),
            frames: frames.len(),
        });
    }
    let mut acc = 0.0;
    for (i, (frame, (tx, ty))) in frames.iter().zip(track.iter()).enumerate() {
        let (cx, cy) = frame_centroid(frame, background, tol)
            .ok_or(MetricsError::NoForeground(i))?;
        acc += ((cx - tx).powi(2) + (cy - ty).powi(2)).sqrt();
    }
    Ok(acc / frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render, ShapeKind, ShapeSpec, SynthConfig};

    #[test]
    fn identical_frames_score_one() {
        let frames = vec![Frame::constant(16, 16, [0.3, -0.2, 0.5]); 4];
        let tc = temporal_consistency(&frames, 7).unwrap();
        assert_eq!(tc, 1.0);
    }

    #[test]
    fn negated_frame_scores_minus_one() {
        let mut rng = RngStream::from_seed(12);
        let data: Vec<f32> = (0..3 * 16 * 16)
            .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
            .collect();
        let a = Frame::new(16, 16, data.clone());
        let b = Frame::new(16, 16, data.iter().map(|v| -v).collect());
        let tc = temporal_consistency(&[a, b], 7).unwrap();
        assert!((tc + 1.0).abs() < 1e-9, "got {tc}");
    }

    #[test]
    fn white_noise_pairs_score_near_zero() {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut rng = RngStream::from_seed(1000 + seed);
            let frames: Vec<Frame> = (0..2)
                .map(|_| {
                    let data: Vec<f32> = (0..3 * 32 * 32)
                        .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                        .collect();
                    Frame::new(32, 32, data)
                })
                .collect();
            let tc = temporal_consistency(&frames, seed).unwrap();
            worst = worst.max(tc.abs());
        }
        assert!(worst < 0.2, "worst |score| {worst}");
    }

    #[test]
    fn consistency_is_reversal_invariant() {
        let mut rng = RngStream::from_seed(5);
        let frames: Vec<Frame> = (0..5)
            .map(|_| {
                let data: Vec<f32> = (0..3 * 8 * 8)
                    .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                    .collect();
                Frame::new(8, 8, data)
            })
            .collect();
        let forward = temporal_consistency(&frames, 3).unwrap();
        let mut reversed = frames.clone();
        reversed.reverse();
        let backward = temporal_consistency(&reversed, 3).unwrap();
        assert_eq!(forward, backward);
    }

    fn moving_square(velocity: (f64, f64)) -> (Vec<Frame>, Vec<(f64, f64)>) {
        let cfg = SynthConfig {
            width: 48,
            height: 32,
            frames: 10,
            background: [1.0, 1.0, 1.0],
            texture_amp: 0.0,
            texture_seed: 0,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Square,
                size: 3.0,
                color: [-0.5, -0.5, 0.5],
                start: (10.0, 16.0),
                velocity,
                spin: 0.0,
            }],
        };
        let v = render(&cfg);
        (v.frames, v.tracks[0].clone())
    }

    #[test]
    fn ground_truth_render_has_zero_trajectory_error() {
        let (frames, track) = moving_square((2.0, 1.0));
        let err = trajectory_error(&frames, &track, [1.0, 1.0, 1.0], 0.25).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn shifted_render_has_exact_offset_error() {
        let (frames, _) = moving_square((2.0, 0.0));
        let (_, track) = moving_square((2.0, 0.0));
        let shifted: Vec<(f64, f64)> = track.iter().map(|(x, y)| (x - 3.0, *y)).collect();
        let err = trajectory_error(&frames, &shifted, [1.0, 1.0, 1.0], 0.25).unwrap();
        assert!((err - 3.0).abs() < 1e-9, "err {err}");
    }

    #[test]
    fn all_background_frame_is_an_error() {
        let frames = vec![Frame::constant(8, 8, [1.0, 1.0, 1.0])];
        let got = trajectory_error(&frames, &[(4.0, 4.0)], [1.0, 1.0, 1.0], 0.25);
        assert!(matches!(got, Err(MetricsError::NoForeground(0))));
    }
}
