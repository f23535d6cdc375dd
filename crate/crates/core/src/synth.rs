//! Synthetic moving-shape videos with ground-truth masks and centroid tracks.
//!
//! Desk-scale stand-in for a real video corpus: 1-3 colored shapes translate
//! (and optionally rotate) over a constant background. The renderer is fully
//! deterministic, and every video ships with per-frame foreground masks and
//! analytic centroid tracks for trajectory oracles.

use std::path::Path;

use firstframe_tensor::RngStream;

use crate::error::MediaError;
use crate::media::{write_frame_dir, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Half-extent in pixels (circumradius for the triangle).
    pub size: f64,
    pub color: [f32; 3],
    /// Center at frame 0, in pixel units.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Radians per frame; ignored for circles.
    pub spin: f64,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: [f32; 3],
    /// Amplitude of the static per-video background micro-texture
    /// (sensor-grain stand-in). 0 disables it.
    pub texture_amp: f32,
    /// Seed for the micro-texture pattern.
    pub texture_seed: u64,
    pub shapes: Vec<ShapeSpec>,
}

/// One rendered video plus its ground truth.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub frames: Vec<Frame>,
    /// Foreground union mask per frame, row-major `[H, W]`, 1 = shape.
    pub masks: Vec<Vec<u8>>,
    /// Analytic center track per shape: `tracks[shape][frame] = (x, y)`.
    pub tracks: Vec<Vec<(f64, f64)>>,
    pub background: [f32; 3],
}

fn inside(kind: ShapeKind, size: f64, angle: f64, dx: f64, dy: f64) -> bool {
    // Rotate the query point into the shape frame.
    let (s, c) = angle.sin_cos();
    let rx = c * dx + s * dy;
    let ry = -s * dx + c * dy;
    match kind {
        ShapeKind::Square => rx.abs() <= size && ry.abs() <= size,
        ShapeKind::Circle => rx * rx + ry * ry <= size * size,
        ShapeKind::Triangle => {
            // Equilateral triangle, circumradius `size`, apex up.
            let verts = [
                (0.0, -size),
                (size * 0.8660254037844386, size * 0.5),
                (-size * 0.8660254037844386, size * 0.5),
            ];
            let mut sign = 0i8;
            for i in 0..3 {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % 3];
                let cross = (x2 - x1) * (ry - y1) - (y2 - y1) * (rx - x1);
                let s = if cross >= 0.0 { 1 } else { -1 };
                if sign == 0 {
                    sign = s;
                } else if sign != s {
                    return false;
                }
            }
            true
        }
    }
}

/// Deterministic shape render with pixel-center coverage.
pub fn render(cfg: &SynthConfig) -> SynthVideo {
    let (h, w) = (cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let mut tracks = vec![Vec::with_capacity(cfg.frames); cfg.shapes.len()];

    // Static micro-texture field, shared by all frames of the video.
    let texture: Vec<f32> = if cfg.texture_amp > 0.0 {
        let mut trng = RngStream::derive(cfg.texture_seed, "synth.texture");
        (0..h * w)
            .map(|_| (trng.uniform() as f32 * 2.0 - 1.0) * cfg.texture_amp)
            .collect()
    } else {
        vec![0.0; h * w]
    };
    for t in 0..cfg.frames {
        let mut frame = Frame::constant(h, w, cfg.background);
        if cfg.texture_amp > 0.0 {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let v = (frame.get(c, y, x) + texture[y * w + x]).clamp(-1.0, 1.0);
                        frame.set(c, y, x, v);
                    }
                }
            }
        }
        let mut mask = vec![0u8; h * w];
        for (si, shape) in cfg.shapes.iter().enumerate() {
            let cx = shape.start.0 + shape.velocity.0 * t as f64;
            let cy = shape.start.1 + shape.velocity.1 * t as f64;
            let angle = shape.spin * t as f64;
            tracks[si].push((cx, cy));
            for y in 0..h {
                for x in 0..w {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    if inside(shape.kind, shape.size, angle, px - cx, py - cy) {
                        mask[y * w + x] = 1;
                        for c in 0..3 {
                            frame.set(c, y, x, shape.color[c]);
                        }
                    }
                }
            }
        }
        frames.push(frame);
        masks.push(mask);
    }
    SynthVideo {
        frames,
        masks,
        tracks,
        background: cfg.background,
    }
}

/// Fraction of pixels covered by the background across all frames.
pub fn background_fraction(video: &SynthVideo) -> f64 {
    let total: usize = video.masks.iter().map(|m| m.len()).sum();
    let fg: usize = video
        .masks
        .iter()
        .map(|m| m.iter().filter(|&&v| v == 1).count())
        .sum();
    1.0 - fg as f64 / total as f64
}

/// A randomized evaluation video: like [`random_video`] but with an
/// exactly constant background (no micro-texture).
pub fn random_eval_video(
    rng: &mut RngStream,
    width: usize,
    height: usize,
    frames: usize,
) -> SynthConfig {
    let mut cfg = random_video(rng, width, height, frames);
    cfg.texture_amp = 0.0;
    cfg
}

/// A randomized corpus video: single translating shape over a
/// micro-textured background, sized so the shape stays inside the frame
/// for all `frames`.
pub fn random_video(rng: &mut RngStream, width: usize, height: usize, frames: usize) -> SynthConfig {
    let kind = match rng.below(3) {
        0 => ShapeKind::Square,
        1 => ShapeKind::Circle,
        _ => ShapeKind::Triangle,
    };
    let size = rng.uniform_in(0.12, 0.2) * width.min(height) as f64;
    let palette = [
        [0.8f32, -0.4, -0.4],
        [-0.4, 0.8, -0.4],
        [-0.4, -0.4, 0.8],
        [0.9, 0.9, -0.6],
        [-0.6, 0.9, 0.9],
        [0.9, -0.6, 0.9],
    ];
    let color = palette[rng.below(palette.len())];
    let bg_options = [
        [1.0f32, 1.0, 1.0],
        [-1.0, -1.0, -1.0],
        [0.49803925f32, 0.49803925, 0.49803925],
        [1.0, 0.49803925, -0.49803925],
    ];
    let mut background = bg_options[rng.below(bg_options.len())];
    if background == color {
        background = [0.0, 0.0, 0.0];
    }
    // Velocity chosen so the full track stays in frame.
    let margin = size + 1.5;
    let span_x = width as f64 - 2.0 * margin;
    let span_y = height as f64 - 2.0 * margin;
    let max_v = 2.0f64.min(span_x / frames as f64);
    let vx = rng.uniform_in(-max_v, max_v);
    let vy = rng.uniform_in(-max_v.min(span_y / frames as f64), max_v.min(span_y / frames as f64));
    let travel_x = vx * (frames - 1) as f64;
    let travel_y = vy * (frames - 1) as f64;
    let x0 = if travel_x >= 0.0 {
        rng.uniform_in(margin, (width as f64 - margin - travel_x).max(margin + 1e-6))
    } else {
        rng.uniform_in(margin - travel_x, (width as f64 - margin).max(margin - travel_x + 1e-6))
    };
    let y0 = if travel_y >= 0.0 {
        rng.uniform_in(margin, (height as f64 - margin - travel_y).max(margin + 1e-6))
    } else {
        rng.uniform_in(margin - travel_y, (height as f64 - margin).max(margin - travel_y + 1e-6))
    };
    let spin = if kind == ShapeKind::Circle {
        0.0
    } else {
        rng.uniform_in(-0.1, 0.1)
    };
    SynthConfig {
        width,
        height,
        frames,
        background,
        texture_amp: 0.006,
        texture_seed: rng.next_u64(),
        shapes: vec![ShapeSpec {
            kind,
            size,
            color,
            start: (x0, y0),
            velocity: (vx, vy),
            spin,
        }],
    }
}

/// Write frames, per-frame masks, and the centroid track under `path`.
pub fn write_video(video: &SynthVideo, path: &Path) -> Result<(), MediaError> {
    write_frame_dir(&video.frames, path)?;
    let unwritable = |reason: String| MediaError::UnwritablePath {
        path: path.to_path_buf(),
        reason,
    };
    let mask_dir = path.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(|e| unwritable(e.to_string()))?;
    let (h, w) = (video.frames[0].height, video.frames[0].width);
    let mask_frames: Vec<Frame> = video
        .masks
        .iter()
        .map(|m| {
            let mut f = Frame::constant(h, w, [-1.0, -1.0, -1.0]);
            for (i, &v) in m.iter().enumerate() {
                if v == 1 {
                    let (y, x) = (i / w, i % w);
                    for c in 0..3 {
                        f.set(c, y, x, 1.0);
                    }
                }
            }
            f
        })
        .collect();
    write_frame_dir(&mask_frames, &mask_dir)?;

    let mut track_text = String::new();
    track_text.push_str(&format!(
        "background {} {} {}\n",
        video.background[0], video.background[1], video.background[2]
    ));
    for (si, track) in video.tracks.iter().enumerate() {
        for (t, (x, y)) in track.iter().enumerate() {
            track_text.push_str(&format!("track {si} {t} {x} {y}\n"));
        }
    }
    std::fs::write(path.join("tracks.txt"), track_text).map_err(|e| unwritable(e.to_string()))?;
    Ok(())
}

/// Parse `tracks.txt` written by [`write_video`]: background plus shape-0 track.
pub fn read_tracks(path: &Path) -> Result<([f32; 3], Vec<(f64, f64)>), MediaError> {
    let text = std::fs::read_to_string(path.join("tracks.txt")).map_err(|e| {
        MediaError::UnreadableFile {
            path: path.join("tracks.txt"),
            reason: e.to_string(),
        }
    })?;
    let mut background = [0.0f32; 3];
    let mut track = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["background", r, g, b] => {
                background = [
                    r.parse().unwrap_or(0.0),
                    g.parse().unwrap_or(0.0),
                    b.parse().unwrap_or(0.0),
                ];
            }
            ["track", "0", _, x, y] => {
                track.push((x.parse().unwrap_or(0.0), y.parse().unwrap_or(0.0)));
            }
            _ => {}
        }
    }
    Ok((background, track))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_cfg(velocity: (f64, f64), frames: usize) -> SynthConfig {
        SynthConfig {
            width: 48,
            height: 32,
            frames,
            background: [1.0, 1.0, 1.0],
            texture_amp: 0.0,
            texture_seed: 0,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Square,
                size: 3.0,
                color: [0.8, -0.4, -0.4],
                start: (8.0, 16.0),
                velocity,
                spin: 0.0,
            }],
        }
    }

    fn mask_centroid(mask: &[u8], w: usize) -> (f64, f64) {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0.0;
        for (i, &v) in mask.iter().enumerate() {
            if v == 1 {
                sx += (i % w) as f64 + 0.5;
                sy += (i / w) as f64 + 0.5;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let video = render(&square_cfg((0.0, 0.0), 6));
        for f in &video.frames[1..] {
            assert_eq!(f, &video.frames[0]);
        }
        for t in &video.tracks[0] {
            assert_eq!(*t, (8.0, 16.0));
        }
    }

    #[test]
    fn integer_velocity_moves_centroid_in_arithmetic_sequence() {
        let video = render(&square_cfg((2.0, 0.0), 14));
        let centroids: Vec<(f64, f64)> = video
            .masks
            .iter()
            .map(|m| mask_centroid(m, 48))
            .collect();
        for t in 1..14 {
            let dx = centroids[t].0 - centroids[t - 1].0;
            let dy = centroids[t].1 - centroids[t - 1].1;
            assert!((dx - 2.0).abs() < 1e-9, "frame {t} dx {dx}");
            assert!(dy.abs() < 1e-9, "frame {t} dy {dy}");
        }
        // Analytic track matches the renderer arithmetic.
        for (t, (x, _)) in video.tracks[0].iter().enumerate() {
            assert_eq!(*x, 8.0 + 2.0 * t as f64);
        }
    }

    #[test]
    fn constant_background_dominates_frame_area() {
        let video = render(&square_cfg((1.0, 0.5), 10));
        assert!(background_fraction(&video) >= 0.4);
    }

    #[test]
    fn random_videos_keep_shape_in_frame() {
        let mut rng = RngStream::from_seed(404);
        for _ in 0..20 {
            let cfg = random_video(&mut rng, 32, 32, 14);
            let video = render(&cfg);
            for (t, mask) in video.masks.iter().enumerate() {
                let fg = mask.iter().filter(|&&v| v == 1).count();
                assert!(fg > 0, "shape left the frame at t={t}");
            }
        }
    }

    #[test]
    fn write_and_read_tracks_round_trip() {
        let dir = std::env::temp_dir().join("ff_synth_tests/tracks");
        let _ = std::fs::remove_dir_all(&dir);
        let video = render(&square_cfg((1.0, 0.0), 5));
        write_video(&video, &dir).unwrap();
        let (bg, track) = read_tracks(&dir).unwrap();
        assert_eq!(bg, [1.0, 1.0, 1.0]);
        assert_eq!(track.len(), 5);
        assert!((track[4].0 - 12.0).abs() < 1e-9);
    }
}
