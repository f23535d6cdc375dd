//! Deterministic pixel-latent codec standing in for a frozen VAE.
//!
//! Two interchangeable codecs share the same contract: a strided
//! convolutional autoencoder (pre-trained on the synthetic corpus, then
//! frozen), and an exact space-to-depth "patchify" codec for
//! exact-arithmetic tests. Both encode per frame with no temporal mixing.

use std::path::Path;

use firstframe_tensor::{Array, RngStream, Scalar, Tape, Tensor};

use crate::artifact::{BlockReader, BlockWriter};
use crate::error::{ArtifactError, CodecError};
use crate::media::{Frame, FrameClip};
use crate::params::{ParamBinder, ParamHandle, ParamSet};

const CODEC_MAGIC: &[u8] = b"FFCODEC1";
const CODEC_VERSION: u32 = 1;

/// Latent representation of a clip at a noise level `sigma`.
#[derive(Debug, Clone)]
pub struct LatentSeq<T: Scalar> {
    /// `[L, C_lat, H/f, W/f]`
    pub data: Array<T>,
    pub sigma: f64,
}

impl<T: Scalar> LatentSeq<T> {
    pub fn clean(data: Array<T>) -> Self {
        Self { data, sigma: 0.0 }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Convert a clip into `[L, 3, H, W]`.
pub fn clip_to_array<T: Scalar>(clip: &FrameClip) -> Array<T> {
    let (h, w) = (clip.height(), clip.width());
    let mut data = Vec::with_capacity(clip.len() * 3 * h * w);
    for f in &clip.frames {
        data.extend(f.data().iter().map(|&v| T::from_f32(v)));
    }
    Array::new(vec![clip.len(), 3, h, w], data)
}

/// Convert `[L, 3, H, W]` back into frames, clamping to [-1, 1].
pub fn array_to_frames<T: Scalar>(a: &Array<T>) -> Vec<Frame> {
    let s = a.shape();
    assert_eq!(s.len(), 4);
    assert_eq!(s[1], 3);
    let (l, h, w) = (s[0], s[2], s[3]);
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        let start = t * 3 * h * w;
        let data: Vec<f32> = a.data()[start..start + 3 * h * w]
            .iter()
            .map(|&v| v.to_f32().clamp(-1.0, 1.0))
            .collect();
        out.push(Frame::new(h, w, data));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CodecKind {
    Conv,
    Patchify,
}

/// Frozen codec with recorded training bounds.
#[derive(Debug, Clone)]
pub struct Codec<T: Scalar> {
    kind: CodecKind,
    pub factor: usize,
    pub c_lat: usize,
    hidden1: usize,
    hidden2: usize,
    pub params: ParamSet<T>,
    enc_handles: Vec<ParamHandle>,
    dec_handles: Vec<ParamHandle>,
    /// Relative L2 reconstruction error measured after pre-training.
    pub recon_bound: f32,
    /// Max |latent| observed over in-range inputs at pre-training time.
    pub latent_bound: f32,
}

impl<T: Scalar> Codec<T> {
    /// Strided conv autoencoder, reduction factor 4.
    pub fn conv(c_lat: usize, seed: u64) -> Self {
        let (hidden1, hidden2) = (32, 64);
        let mut params = ParamSet::new();
        let mut rng = RngStream::derive(seed, "codec.init");
        let mut conv_init = |p: &mut ParamSet<T>, name: &str, o: usize, i: usize, k: usize| {
            let std = (2.0 / (i * k * k) as f64).sqrt();
            let w = rng.fill_normal_scaled(&[o, i, k, k], std);
            let wh = p.add(format!("{name}.w"), w);
            let bh = p.add(format!("{name}.b"), Array::zeros(&[o]));
            (wh, bh)
        };
        let e1 = conv_init(&mut params, "enc.conv1", hidden1, 3, 3);
        let e2 = conv_init(&mut params, "enc.conv2", hidden2, hidden1, 3);
        let e3 = conv_init(&mut params, "enc.conv3", hidden2, hidden2, 3);
        let e4 = conv_init(&mut params, "enc.conv4", c_lat, hidden2, 3);
        let d1 = conv_init(&mut params, "dec.conv1", hidden2, c_lat, 3);
        let d2 = conv_init(&mut params, "dec.conv2", hidden2, hidden2, 3);
        let d3 = conv_init(&mut params, "dec.conv3", hidden1, hidden2, 3);
        let d4 = conv_init(&mut params, "dec.conv4", hidden1, hidden1, 3);
        let d5 = conv_init(&mut params, "dec.conv5", 3, hidden1, 3);
        Self {
            kind: CodecKind::Conv,
            factor: 4,
            c_lat,
            hidden1,
            hidden2,
            params,
            enc_handles: vec![e1.0, e1.1, e2.0, e2.1, e3.0, e3.1, e4.0, e4.1],
            dec_handles: vec![
                d1.0, d1.1, d2.0, d2.1, d3.0, d3.1, d4.0, d4.1, d5.0, d5.1,
            ],
            recon_bound: 1.0,
            latent_bound: 8.0,
        }
    }

    /// Exact space-to-depth codec: reversible, zero reconstruction error.
    pub fn patchify(factor: usize) -> Self {
        Self {
            kind: CodecKind::Patchify,
            factor,
            c_lat: 3 * factor * factor,
            hidden1: 0,
            hidden2: 0,
            params: ParamSet::new(),
            enc_handles: Vec::new(),
            dec_handles: Vec::new(),
            recon_bound: 0.0,
            latent_bound: 1.0,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.kind == CodecKind::Patchify
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<(), CodecError> {
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(CodecError::NotDivisible {
                h,
                w,
                factor: self.factor,
            });
        }
        Ok(())
    }

    /// Encoder applied to `[L, 3, H, W]` on an existing tape (training path).
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        x: Tensor,
    ) -> Tensor {
        match self.kind {
            CodecKind::Conv => {
                let h = &self.enc_handles;
                let strides = [2usize, 2, 1, 1];
                let mut cur = x;
                for (li, st) in strides.iter().enumerate() {
                    let w = binder.bind(tape, &self.params, h[2 * li]);
                    let b = binder.bind(tape, &self.params, h[2 * li + 1]);
                    cur = tape.conv2d(cur, w, *st, 1);
                    cur = tape.add_channel_bias(cur, b);
                    if li + 1 < strides.len() {
                        cur = tape.silu(cur);
                    }
                }
                cur
            }
            CodecKind::Patchify => {
                // [L,3,H,W] -> [L, 3*f*f, H/f, W/f] via reshape + permute.
                let s = tape.shape(x).to_vec();
                let (l, c, hh, ww) = (s[0], s[1], s[2], s[3]);
                let f = self.factor;
                let r = tape.reshape(x, vec![l, c, hh / f, f, ww / f, f]);
                let p = tape.permute(r, &[0, 1, 3, 5, 2, 4]);
                tape.reshape(p, vec![l, c * f * f, hh / f, ww / f])
            }
        }
    }

    /// Decoder applied to `[L, C_lat, h, w]` on an existing tape.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        z: Tensor,
    ) -> Tensor {
        match self.kind {
            CodecKind::Conv => {
                let h = &self.dec_handles;
                let conv = |tape: &mut Tape<T>, binder: &mut ParamBinder, x: Tensor, li: usize| {
                    let w = binder.bind(tape, &self.params, h[2 * li]);
                    let b = binder.bind(tape, &self.params, h[2 * li + 1]);
                    let y = tape.conv2d(x, w, 1, 1);
                    tape.add_channel_bias(y, b)
                };
                let c1 = conv(tape, binder, z, 0);
                let a1 = tape.silu(c1);
                let c2 = conv(tape, binder, a1, 1);
                let a2 = tape.silu(c2);
                let u1 = tape.upsample_nearest2(a2);
                let c3 = conv(tape, binder, u1, 2);
                let a3 = tape.silu(c3);
                let u2 = tape.upsample_nearest2(a3);
                let c4 = conv(tape, binder, u2, 3);
                let a4 = tape.silu(c4);
                conv(tape, binder, a4, 4)
            }
            CodecKind::Patchify => {
                let s = tape.shape(z).to_vec();
                let f = self.factor;
                let (l, cl, hh, ww) = (s[0], s[1], s[2], s[3]);
                let c = cl / (f * f);
                let r = tape.reshape(z, vec![l, c, f, f, hh, ww]);
                let p = tape.permute(r, &[0, 1, 4, 2, 5, 3]);
                tape.reshape(p, vec![l, c, hh * f, ww * f])
            }
        }
    }

    /// Deterministic clean encoding (sigma = 0).
    pub fn encode(&self, clip: &FrameClip) -> Result<LatentSeq<T>, CodecError> {
        if !clip.frames.iter().all(Frame::in_range) {
            return Err(CodecError::ValuesOutOfRange);
        }
        self.check_dims(clip.height(), clip.width())?;
        let x = clip_to_array::<T>(clip);
        Ok(LatentSeq::clean(self.encode_array(&x)))
    }

    /// Encode a raw `[L, 3, H, W]` array (values assumed in range).
    pub fn encode_array(&self, x: &Array<T>) -> Array<T> {
        let mut tape = Tape::no_grad();
        let mut binder = ParamBinder::new(&self.params);
        let xi = tape.input(x.clone());
        let z = self.encode_on_tape(&mut tape, &mut binder, xi);
        tape.value(z).clone()
    }

    /// Deterministic decode; requires sigma = 0, clamps output to [-1, 1].
    pub fn decode(&self, z: &LatentSeq<T>) -> Result<FrameClip, CodecError> {
        if z.sigma != 0.0 {
            return Err(CodecError::NonZeroSigma(z.sigma));
        }
        let frames = array_to_frames(&self.decode_array(&z.data));
        Ok(FrameClip {
            frames,
            clip_index: 1,
            first_frame_is_condition: true,
        })
    }

    pub fn decode_array(&self, z: &Array<T>) -> Array<T> {
        let mut tape = Tape::no_grad();
        let mut binder = ParamBinder::new(&self.params);
        let zi = tape.input(z.clone());
        let x = self.decode_on_tape(&mut tape, &mut binder, zi);
        tape.value(x).clone()
    }

    /// Encode a single frame: `[3,H,W]` -> `[C_lat, h, w]`.
    pub fn encode_frame(&self, frame: &Frame) -> Result<Array<T>, CodecError> {
        self.check_dims(frame.height, frame.width)?;
        let x = Array::from_f32_slice(&[1, 3, frame.height, frame.width], frame.data());
        let z = self.encode_array(&x);
        let s = z.shape().to_vec();
        Ok(z.reshaped(vec![s[1], s[2], s[3]]))
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let mut w = BlockWriter::create(path, CODEC_MAGIC, CODEC_VERSION)?;
        w.u32(match self.kind {
            CodecKind::Conv => 0,
            CodecKind::Patchify => 1,
        })?;
        w.u32(self.factor as u32)?;
        w.u32(self.c_lat as u32)?;
        w.u32(self.hidden1 as u32)?;
        w.u32(self.hidden2 as u32)?;
        w.f32(self.recon_bound)?;
        w.f32(self.latent_bound)?;
        w.u32(self.params.len() as u32)?;
        for (name, a) in self.params.iter() {
            w.array(name, a)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let mut r = BlockReader::open(path, CODEC_MAGIC, CODEC_VERSION)?;
        let kind = r.u32()?;
        let factor = r.u32()? as usize;
        let c_lat = r.u32()? as usize;
        let _hidden1 = r.u32()? as usize;
        let _hidden2 = r.u32()? as usize;
        let recon_bound = r.f32()?;
        let latent_bound = r.f32()?;
        let count = r.u32()? as usize;
        let mut codec = match kind {
            0 => Self::conv(c_lat, 0),
            1 => Self::patchify(factor),
            other => {
                return Err(ArtifactError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("unknown codec kind {other}"),
                })
            }
        };
        for _ in 0..count {
            let (name, a) = r.array::<T>()?;
            codec
                .params
                .load_named(&name, a)
                .map_err(|detail| ArtifactError::Corrupt {
                    path: path.to_path_buf(),
                    detail,
                })?;
        }
        r.expect_eof()?;
        codec.recon_bound = recon_bound;
        codec.latent_bound = latent_bound;
        Ok(codec)
    }
}
