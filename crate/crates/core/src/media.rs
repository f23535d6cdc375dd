//! Frame I/O, pixel normalization, and clip segmentation.
//!
//! Pixels live in [-1, 1] for all model-facing math; files are 8-bit RGB
//! PNGs named `frame_000001.png` onward, with a `manifest` text file
//! recording frame count, dimensions, and (when known) the clip plan.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::MediaError;

/// One RGB frame, channel-planar `[3, H, W]`, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            data.extend(std::iter::repeat(rgb[c]).take(height * width));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|&v| (-1.0..=1.0).contains(&v) && v.is_finite())
    }

    fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        let mut data = vec![0f32; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let b = bytes[(y * width + x) * 3 + c];
                    data[(c * height + y) * width + x] = byte_to_value(b);
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; 3 * self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out[(y * self.width + x) * 3 + c] = value_to_byte(self.get(c, y, x));
                }
            }
        }
        out
    }
}

/// Affine 8-bit decode: 0 -> -1.0, 255 -> +1.0.
#[inline]
pub fn byte_to_value(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Inverse of [`byte_to_value`] with round-to-nearest.
#[inline]
pub fn value_to_byte(v: f32) -> u8 {
    let clamped = v.clamp(-1.0, 1.0);
    ((clamped + 1.0) * 0.5 * 255.0).round() as u8
}

/// A fixed-length sequence of frames feeding the first-frame-conditioned model.
#[derive(Debug, Clone)]
pub struct FrameClip {
    pub frames: Vec<Frame>,
    /// 1-based position within its [`ClipPlan`].
    pub clip_index: usize,
    pub first_frame_is_condition: bool,
}

impl FrameClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

/// Inclusive frame index range of one clip within the padded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipSpan {
    pub start: usize,
    pub end: usize,
}

/// Segmentation of a video into clips overlapping by exactly one frame, so
/// each clip's conditional frame is the previous clip's final frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub total_frames: usize,
    /// total_frames plus any tail padding by last-frame repetition.
    pub padded_frames: usize,
    pub clip_length: usize,
    pub clips: Vec<ClipSpan>,
}

impl ClipPlan {
    pub fn num_clips(&self) -> usize {
        self.clips.len()
    }

    pub fn padding(&self) -> usize {
        self.padded_frames - self.total_frames
    }
}

/// Split `total_frames` into clips of length `clip_length` overlapping by one
/// frame. The tail is padded by repeating the last frame when
/// `(total_frames - 1) % (clip_length - 1) != 0`.
pub fn segment_clips(total_frames: usize, clip_length: usize) -> Result<ClipPlan, MediaError> {
    if clip_length < 2 {
        return Err(MediaError::ClipLengthTooShort(clip_length));
    }
    if total_frames < clip_length {
        return Err(MediaError::TotalTooShort {
            total: total_frames,
            clip_length,
        });
    }
    let stride = clip_length - 1;
    let n = (total_frames - 1).div_ceil(stride);
    let padded_frames = n * stride + 1;
    let clips = (0..n)
        .map(|i| ClipSpan {
            start: i * stride,
            end: i * stride + stride,
        })
        .collect();
    Ok(ClipPlan {
        total_frames,
        padded_frames,
        clip_length,
        clips,
    })
}

/// Materialize clip `index` (0-based) from the full frame list, repeating the
/// final frame into any padded tail positions.
pub fn clip_frames(frames: &[Frame], plan: &ClipPlan, index: usize) -> FrameClip {
    let span = plan.clips[index];
    let mut clip = Vec::with_capacity(plan.clip_length);
    for i in span.start..=span.end {
        let src = i.min(frames.len() - 1);
        clip.push(frames[src].clone());
    }
    FrameClip {
        frames: clip,
        clip_index: index + 1,
        first_frame_is_condition: true,
    }
}

/// Rebuild the padded frame sequence from per-clip frames by dropping each
/// later clip's first (shared) frame.
pub fn reassemble(clips: &[FrameClip], plan: &ClipPlan) -> Vec<Frame> {
    let mut out: Vec<Frame> = Vec::with_capacity(plan.padded_frames);
    for (i, clip) in clips.iter().enumerate() {
        let skip = if i == 0 { 0 } else { 1 };
        out.extend(clip.frames.iter().skip(skip).cloned());
    }
    out
}

fn frame_file_name(i: usize) -> String {
    format!("frame_{:06}.png", i + 1)
}

/// Load all frames from a directory in filename order.
pub fn load_frame_dir(path: &Path) -> Result<Vec<Frame>, MediaError> {
    if !path.is_dir() {
        return Err(MediaError::MissingDirectory(path.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|_| MediaError::MissingDirectory(path.to_path_buf()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MediaError::NoFrames(path.to_path_buf()));
    }

    let mut frames = Vec::with_capacity(files.len());
    let mut dims: Option<(usize, usize)> = None;
    for f in &files {
        let frame = read_png(f)?;
        if let Some((w, h)) = dims {
            if frame.width != w || frame.height != h {
                return Err(MediaError::InconsistentDimensions {
                    path: f.clone(),
                    got_w: frame.width,
                    got_h: frame.height,
                    want_w: w,
                    want_h: h,
                });
            }
        } else {
            dims = Some((frame.width, frame.height));
        }
        frames.push(frame);
    }
    Ok(frames)
}

fn read_png(path: &Path) -> Result<Frame, MediaError> {
    let unreadable = |reason: String| MediaError::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| unreadable(e.to_string()))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| unreadable(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| unreadable(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..3 * w * h].to_vec(),
        png::ColorType::Rgba => buf[..4 * w * h]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(unreadable(format!("unsupported color type {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unreadable(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    Ok(Frame::from_rgb8(h, w, &rgb))
}

/// Load a single image file as one frame.
pub fn load_frame_file(path: &Path) -> Result<Frame, MediaError> {
    read_png(path)
}

/// Write frames as `frame_%06d.png` plus a `manifest` file.
pub fn write_frame_dir(frames: &[Frame], path: &Path) -> Result<(), MediaError> {
    write_frame_dir_with_plan(frames, path, None)
}

pub fn write_frame_dir_with_plan(
    frames: &[Frame],
    path: &Path,
    plan: Option<&ClipPlan>,
) -> Result<(), MediaError> {
    if frames.is_empty() {
        return Err(MediaError::EmptyFrameList);
    }
    if !frames.iter().all(Frame::in_range) {
        return Err(MediaError::ValuesOutOfRange);
    }
    let unwritable = |reason: String| MediaError::UnwritablePath {
        path: path.to_path_buf(),
        reason,
    };
    std::fs::create_dir_all(path).map_err(|e| unwritable(e.to_string()))?;
    for (i, frame) in frames.iter().enumerate() {
        let fp = path.join(frame_file_name(i));
        let file = File::create(&fp).map_err(|e| unwritable(e.to_string()))?;
        let w = BufWriter::new(file);
        let mut encoder = png::Encoder::new(w, frame.width as u32, frame.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| unwritable(e.to_string()))?;
        writer
            .write_image_data(&frame.to_rgb8())
            .map_err(|e| unwritable(e.to_string()))?;
    }

    let mut manifest = String::new();
    manifest.push_str(&format!("frames {}\n", frames.len()));
    manifest.push_str(&format!("height {}\n", frames[0].height));
    manifest.push_str(&format!("width {}\n", frames[0].width));
    if let Some(plan) = plan {
        manifest.push_str(&format!("clip_length {}\n", plan.clip_length));
        manifest.push_str(&format!("padded_frames {}\n", plan.padded_frames));
        for (i, c) in plan.clips.iter().enumerate() {
            manifest.push_str(&format!("clip {} {} {}\n", i + 1, c.start, c.end));
        }
    }
    let mut mf = File::create(path.join("manifest")).map_err(|e| unwritable(e.to_string()))?;
    mf.write_all(manifest.as_bytes())
        .map_err(|e| unwritable(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let p = std::env::temp_dir().join("ff_media_tests").join(name);
        let _ = std::fs::remove_dir_all(&p);
        std::fs::create_dir_all(&p).unwrap();
        p
    }

    #[test]
    fn byte_mapping_hits_range_endpoints() {
        assert_eq!(byte_to_value(255), 1.0);
        assert_eq!(byte_to_value(0), -1.0);
        assert_eq!(value_to_byte(1.0), 255);
        assert_eq!(value_to_byte(-1.0), 0);
    }

    #[test]
    fn mid_gray_loads_to_zero_within_quantization() {
        // No 8-bit code hits 0.0 exactly under the endpoint-exact affine map;
        // the midpoint lands within one quantization step.
        let dir = tmp("midgray");
        let frames = vec![Frame::constant(16, 16, [0.0, 0.0, 0.0]); 3];
        write_frame_dir(&frames, &dir).unwrap();
        let back = load_frame_dir(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for f in &back {
            for &v in f.data() {
                assert!(v.abs() <= 1.0 / 255.0 + 1e-6, "mid-gray decoded to {v}");
            }
        }
    }

    #[test]
    fn round_trip_error_within_quantization_bound() {
        let dir = tmp("roundtrip");
        let mut rng = firstframe_tensor::RngStream::from_seed(99);
        let data: Vec<f32> = (0..3 * 8 * 8)
            .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
            .collect();
        let frames = vec![Frame::new(8, 8, data)];
        write_frame_dir(&frames, &dir).unwrap();
        let back = load_frame_dir(&dir).unwrap();
        let max_err = frames[0]
            .data()
            .iter()
            .zip(back[0].data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-7, "max err {max_err}");
    }

    #[test]
    fn black_frame_round_trips_exactly() {
        let dir = tmp("black");
        let frames = vec![Frame::constant(4, 4, [-1.0, -1.0, -1.0])];
        write_frame_dir(&frames, &dir).unwrap();
        let back = load_frame_dir(&dir).unwrap();
        assert!(back[0].data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn empty_frame_list_is_an_error() {
        let dir = tmp("empty");
        assert!(matches!(
            write_frame_dir(&[], &dir),
            Err(MediaError::EmptyFrameList)
        ));
    }

    #[test]
    fn missing_directory_is_an_error() {
        let p = std::env::temp_dir().join("ff_media_tests/definitely_absent");
        assert!(matches!(
            load_frame_dir(&p),
            Err(MediaError::MissingDirectory(_))
        ));
    }

    #[test]
    fn inconsistent_dimensions_are_detected() {
        let dir = tmp("dims");
        write_frame_dir(&[Frame::constant(4, 4, [0.5, 0.5, 0.5])], &dir).unwrap();
        // Second file with different dims, named to sort after the first.
        let f2 = Frame::constant(6, 4, [0.5, 0.5, 0.5]);
        let tmp2 = tmp("dims_src");
        write_frame_dir(&[f2], &tmp2).unwrap();
        std::fs::copy(tmp2.join("frame_000001.png"), dir.join("frame_000002.png")).unwrap();
        assert!(matches!(
            load_frame_dir(&dir),
            Err(MediaError::InconsistentDimensions { .. })
        ));
    }

    #[test]
    fn segment_single_clip() {
        let plan = segment_clips(14, 14).unwrap();
        assert_eq!(plan.num_clips(), 1);
        assert_eq!(plan.clips[0], ClipSpan { start: 0, end: 13 });
        assert_eq!(plan.padding(), 0);
    }

    #[test]
    fn segment_27_frames_into_two_clips() {
        let plan = segment_clips(27, 14).unwrap();
        assert_eq!(plan.num_clips(), 2);
        assert_eq!(plan.clips[0], ClipSpan { start: 0, end: 13 });
        assert_eq!(plan.clips[1], ClipSpan { start: 13, end: 26 });
        assert_eq!(plan.padding(), 0);
    }

    #[test]
    fn segment_118_frames_into_nine_clips() {
        let plan = segment_clips(118, 14).unwrap();
        assert_eq!(plan.num_clips(), 9);
        assert_eq!(plan.clips[8].end, 117);
    }

    #[test]
    fn segment_pads_non_divisible_tail() {
        let plan = segment_clips(20, 14).unwrap();
        assert_eq!(plan.num_clips(), 2);
        assert_eq!(plan.padded_frames, 27);
        assert_eq!(plan.padding(), 7);
    }

    #[test]
    fn segment_too_short_is_an_error() {
        assert!(matches!(
            segment_clips(10, 14),
            Err(MediaError::TotalTooShort { .. })
        ));
    }

    #[test]
    fn clips_share_boundary_frames_and_reassemble() {
        let frames: Vec<Frame> = (0..20)
            .map(|i| Frame::constant(4, 4, [i as f32 / 20.0, 0.0, 0.0]))
            .collect();
        let plan = segment_clips(20, 14).unwrap();
        let clips: Vec<FrameClip> = (0..plan.num_clips())
            .map(|i| clip_frames(&frames, &plan, i))
            .collect();
        for i in 1..clips.len() {
            assert_eq!(
                clips[i - 1].frames.last().unwrap(),
                &clips[i].frames[0],
                "boundary frame shared between clip {i} and {}",
                i + 1
            );
        }
        let rebuilt = reassemble(&clips, &plan);
        assert_eq!(rebuilt.len(), plan.padded_frames);
        for (i, f) in rebuilt.iter().enumerate() {
            let src = i.min(frames.len() - 1);
            assert_eq!(f, &frames[src], "frame {i}");
        }
    }
}
