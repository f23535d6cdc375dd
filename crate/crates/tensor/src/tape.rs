//! Reverse-mode autodiff over a linear tape.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so the backward sweep is a single reverse pass. Inference callers
//! build the tape with gradients disabled; values are still recorded because
//! later ops read their inputs by id.

use crate::array::Array;
use crate::kernels::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, matmul_nn, matmul_nt,
    matmul_tn, softmax_backward_rows, softmax_rows, ConvShape,
};
use crate::scalar::Scalar;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, T),
    /// Batched C = A·B with A [b,m,k], B [b,k,n].
    MatmulNn {
        a: Tensor,
        b: Tensor,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Batched C = A·Bᵀ with A [b,m,k], B [b,n,k].
    MatmulNt {
        a: Tensor,
        b: Tensor,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    AddChannelBias {
        x: Tensor,
        b: Tensor,
    },
    AddLastBias {
        x: Tensor,
        b: Tensor,
    },
    Softmax {
        x: Tensor,
    },
    Silu {
        x: Tensor,
    },
    NormGroups {
        x: Tensor,
        slice_len: usize,
        invstd: Vec<T>,
    },
    ChannelScaleShift {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
    },
    Reshape {
        x: Tensor,
    },
    Permute {
        x: Tensor,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    RepeatLead {
        x: Tensor,
        n: usize,
    },
    UpsampleNearest2 {
        x: Tensor,
    },
    SumAll {
        x: Tensor,
    },
    MeanAll {
        x: Tensor,
    },
}

pub struct Tape<T: Scalar> {
    vals: Vec<Array<T>>,
    ops: Vec<Op<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor handle.
pub struct Grads<T: Scalar> {
    g: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, t: Tensor) -> Option<&Array<T>> {
        self.g[t.0].as_ref()
    }
    pub fn take(&mut self, t: Tensor) -> Option<Array<T>> {
        self.g[t.0].take()
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_array<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let in_shape = x.shape();
    assert_eq!(perm.len(), in_shape.len(), "perm rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![T::ZERO; x.numel()];
    let xd = x.data();
    // Iterate over output linear indices, mapping back to input offsets.
    let ndim = perm.len();
    let numel = x.numel();
    let mut idx = vec![0usize; ndim];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for d in 0..ndim {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut src = 0usize;
        for d in 0..ndim {
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = xd[src];
    }
    let _ = numel;
    Array::new(out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            vals: Vec::new(),
            ops: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, t: Tensor) -> &Array<T> {
        &self.vals[t.0]
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.vals[t.0].shape()
    }

    fn push(&mut self, v: Array<T>, op: Op<T>) -> Tensor {
        self.vals.push(v);
        if self.grad_enabled {
            self.ops.push(op);
        } else {
            self.ops.push(Op::Leaf);
        }
        Tensor(self.vals.len() - 1)
    }

    pub fn input(&mut self, v: Array<T>) -> Tensor {
        self.vals.push(v);
        self.ops.push(Op::Leaf);
        Tensor(self.vals.len() - 1)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = self.vals[a.0].zip(&self.vals[b.0], |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = self.vals[a.0].zip(&self.vals[b.0], |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = self.vals[a.0].zip(&self.vals[b.0], |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let v = self.vals[a.0].map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Tensor, c: T) -> Tensor {
        let v = self.vals[a.0].map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Batched matmul. Accepts [m,k]·[k,n] or [b,m,k]·[b,k,n].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (batch, m, k) = split_batched(self.shape(a));
        let (batch_b, k2, n) = split_batched(self.shape(b));
        assert_eq!(batch, batch_b, "matmul batch mismatch");
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![T::ZERO; batch * m * n];
        for bi in 0..batch {
            matmul_nn(
                &self.vals[a.0].data()[bi * m * k..(bi + 1) * m * k],
                &self.vals[b.0].data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = batched_shape(self.shape(a), m, n);
        let v = Array::new(out_shape, out);
        self.push(v, Op::MatmulNn { a, b, batch, m, k, n })
    }

    /// Batched A·Bᵀ. Accepts [m,k]·[n,k] or [b,m,k]·[b,n,k].
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (batch, m, k) = split_batched(self.shape(a));
        let (batch_b, n, k2) = split_batched(self.shape(b));
        assert_eq!(batch, batch_b, "matmul_nt batch mismatch");
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut out = vec![T::ZERO; batch * m * n];
        for bi in 0..batch {
            matmul_nt(
                &self.vals[a.0].data()[bi * m * k..(bi + 1) * m * k],
                &self.vals[b.0].data()[bi * n * k..(bi + 1) * n * k],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = batched_shape(self.shape(a), m, n);
        let v = Array::new(out_shape, out);
        self.push(v, Op::MatmulNt { a, b, batch, m, k, n })
    }

    pub fn conv2d(&mut self, x: Tensor, w: Tensor, stride: usize, pad: usize) -> Tensor {
        let sh = conv_shape(self.shape(x), self.shape(w), stride, pad);
        let mut y = vec![T::ZERO; sh.batch * sh.c_out * sh.out_h() * sh.out_w()];
        conv2d_forward(self.vals[x.0].data(), self.vals[w.0].data(), &sh, &mut y);
        let v = Array::new(vec![sh.batch, sh.c_out, sh.out_h(), sh.out_w()], y);
        self.push(v, Op::Conv2d { x, w, stride, pad })
    }

    /// x: [N,C,H,W] (or [N,C,M]), b: [C] broadcast over N and trailing dims.
    pub fn add_channel_bias(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2);
        let c = xs[1];
        assert_eq!(self.shape(b), &[c], "channel bias must be [C]");
        let tail: usize = xs[2..].iter().product();
        let n = xs[0];
        let mut out = self.vals[x.0].data().to_vec();
        let bd = self.vals[b.0].data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * tail;
                let bv = bd[ci];
                for v in &mut out[base..base + tail] {
                    *v += bv;
                }
            }
        }
        let v = Array::new(xs, out);
        self.push(v, Op::AddChannelBias { x, b })
    }

    /// x: [.., C], b: [C] broadcast over all leading dims.
    pub fn add_last_bias(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().expect("rank >= 1");
        assert_eq!(self.shape(b), &[c], "bias must be [C]");
        let bd = self.vals[b.0].data().to_vec();
        let mut out = self.vals[x.0].data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bd[i % c];
        }
        let v = Array::new(xs, out);
        self.push(v, Op::AddLastBias { x, b })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Tensor) -> Tensor {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().expect("rank >= 1");
        let rows = self.vals[x.0].numel() / width;
        let mut out = vec![T::ZERO; rows * width];
        softmax_rows(self.vals[x.0].data(), rows, width, &mut out);
        let v = Array::new(xs, out);
        self.push(v, Op::Softmax { x })
    }

    pub fn silu(&mut self, x: Tensor) -> Tensor {
        let v = self.vals[x.0].map(|v| {
            let s = T::ONE / (T::ONE + (-v).exp());
            v * s
        });
        self.push(v, Op::Silu { x })
    }

    /// Group normalization without affine over [N, C, ...]; normalizes each
    /// (sample, group) slice to zero mean / unit variance.
    pub fn norm_groups(&mut self, x: Tensor, groups: usize, eps: T) -> Tensor {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2);
        let (n, c) = (xs[0], xs[1]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let tail: usize = xs[2..].iter().product();
        let slice_len = (c / groups) * tail;
        let num_slices = n * groups;
        let xd = self.vals[x.0].data();
        let mut out = vec![T::ZERO; xd.len()];
        let mut invstds = Vec::with_capacity(num_slices);
        let m = T::from_f64(slice_len as f64);
        for s in 0..num_slices {
            let src = &xd[s * slice_len..(s + 1) * slice_len];
            let dst = &mut out[s * slice_len..(s + 1) * slice_len];
            let mut mean = T::ZERO;
            for &v in src {
                mean += v;
            }
            mean = mean / m;
            let mut var = T::ZERO;
            for &v in src {
                let d = v - mean;
                var += d * d;
            }
            var = var / m;
            let invstd = T::ONE / (var + eps).sqrt();
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = (v - mean) * invstd;
            }
            invstds.push(invstd);
        }
        let keep = self.grad_enabled;
        let v = Array::new(xs, out);
        self.push(
            v,
            Op::NormGroups {
                x,
                slice_len,
                invstd: if keep { invstds } else { Vec::new() },
            },
        )
    }

    /// y[n,c,..] = x[n,c,..] * gamma[c] + beta[c]
    pub fn channel_scale_shift(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let tail: usize = xs[2..].iter().product();
        let n = xs[0];
        let g = self.vals[gamma.0].data().to_vec();
        let be = self.vals[beta.0].data().to_vec();
        let mut out = self.vals[x.0].data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * tail;
                for v in &mut out[base..base + tail] {
                    *v = *v * g[ci] + be[ci];
                }
            }
        }
        let v = Array::new(xs, out);
        self.push(v, Op::ChannelScaleShift { x, gamma, beta })
    }

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Tensor {
        let v = self.vals[x.0].clone().reshaped(shape);
        self.push(v, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Tensor, perm: &[usize]) -> Tensor {
        let v = permute_array(&self.vals[x.0], perm);
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dim mismatch");
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let pd = self.vals[p.0].data();
            for o in 0..outer {
                let src = &pd[o * pa * inner..(o + 1) * pa * inner];
                let dst = &mut out[o * row_out + offset * inner..o * row_out + (offset + pa) * inner];
                dst.copy_from_slice(src);
            }
            offset += pa;
        }
        let v = Array::new(out_shape, out);
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let xs = self.shape(x).to_vec();
        assert!(start + len <= xs[axis], "slice out of range");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let xd = self.vals[x.0].data();
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = &xd[(o * xs[axis] + start) * inner..(o * xs[axis] + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let v = Array::new(out_shape, out);
        self.push(v, Op::Slice { x, axis, start })
    }

    /// Tile x along a new leading axis: out shape = [n, ..x].
    pub fn repeat_lead(&mut self, x: Tensor, n: usize) -> Tensor {
        let xs = self.shape(x).to_vec();
        let xd = self.vals[x.0].data();
        let mut out = Vec::with_capacity(xd.len() * n);
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        let mut shape = Vec::with_capacity(xs.len() + 1);
        shape.push(n);
        shape.extend_from_slice(&xs);
        let v = Array::new(shape, out);
        self.push(v, Op::RepeatLead { x, n })
    }

    /// Nearest-neighbor 2x upsampling of [N,C,H,W].
    pub fn upsample_nearest2(&mut self, x: Tensor) -> Tensor {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.vals[x.0].data();
        let mut out = vec![T::ZERO; n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for pc in 0..n * c {
            let src = &xd[pc * h * w..(pc + 1) * h * w];
            let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
            for y in 0..oh {
                for x2 in 0..ow {
                    dst[y * ow + x2] = src[(y / 2) * w + x2 / 2];
                }
            }
        }
        let v = Array::new(vec![n, c, oh, ow], out);
        self.push(v, Op::UpsampleNearest2 { x })
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let mut acc = T::ZERO;
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        self.push(Array::scalar(acc), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let numel = self.vals[x.0].numel();
        let mut acc = T::ZERO;
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let v = acc / T::from_f64(numel as f64);
        self.push(Array::scalar(v), Op::MeanAll { x })
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse sweep from a scalar loss. Returns per-tensor gradients.
    pub fn backward(&self, loss: Tensor) -> Grads<T> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.vals[loss.0].numel(), 1, "loss must be scalar");
        let mut g: Vec<Option<Array<T>>> = (0..self.vals.len()).map(|_| None).collect();
        g[loss.0] = Some(Array::scalar(T::ONE));

        for id in (0..=loss.0).rev() {
            let Some(gy) = g[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {
                    g[id] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut g, *a, gy.clone());
                    accum(&mut g, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut g, *a, gy.clone());
                    accum(&mut g, *b, gy.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = gy.zip(&self.vals[b.0], |g1, bv| g1 * bv);
                    let gb = gy.zip(&self.vals[a.0], |g1, av| g1 * av);
                    accum(&mut g, *a, ga);
                    accum(&mut g, *b, gb);
                }
                Op::Neg(a) => accum(&mut g, *a, gy.map(|v| -v)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accum(&mut g, *a, gy.map(|v| v * c));
                }
                Op::MatmulNn { a, b, batch, m, k, n } => {
                    // dA = dC·Bᵀ ; dB = Aᵀ·dC
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let mut da = vec![T::ZERO; batch * m * k];
                    let mut db = vec![T::ZERO; batch * k * n];
                    for bi in 0..batch {
                        let gslice = &gy.data()[bi * m * n..(bi + 1) * m * n];
                        matmul_nt(
                            gslice,
                            &self.vals[b.0].data()[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                        matmul_tn(
                            &self.vals[a.0].data()[bi * m * k..(bi + 1) * m * k],
                            gslice,
                            k,
                            m,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    accum(&mut g, *a, Array::new(self.shape(*a).to_vec(), da));
                    accum(&mut g, *b, Array::new(self.shape(*b).to_vec(), db));
                }
                Op::MatmulNt { a, b, batch, m, k, n } => {
                    // C = A·Bᵀ : dA = dC·B ; dB = dCᵀ·A
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let mut da = vec![T::ZERO; batch * m * k];
                    let mut db = vec![T::ZERO; batch * n * k];
                    for bi in 0..batch {
                        let gslice = &gy.data()[bi * m * n..(bi + 1) * m * n];
                        matmul_nn(
                            gslice,
                            &self.vals[b.0].data()[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                        matmul_tn(
                            gslice,
                            &self.vals[a.0].data()[bi * m * k..(bi + 1) * m * k],
                            n,
                            m,
                            k,
                            &mut db[bi * n * k..(bi + 1) * n * k],
                        );
                    }
                    accum(&mut g, *a, Array::new(self.shape(*a).to_vec(), da));
                    accum(&mut g, *b, Array::new(self.shape(*b).to_vec(), db));
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let sh = conv_shape(self.shape(*x), self.shape(*w), *stride, *pad);
                    let mut dx = vec![T::ZERO; self.vals[x.0].numel()];
                    let mut dw = vec![T::ZERO; self.vals[w.0].numel()];
                    conv2d_backward_input(gy.data(), self.vals[w.0].data(), &sh, &mut dx);
                    conv2d_backward_weight(self.vals[x.0].data(), gy.data(), &sh, &mut dw);
                    accum(&mut g, *x, Array::new(self.shape(*x).to_vec(), dx));
                    accum(&mut g, *w, Array::new(self.shape(*w).to_vec(), dw));
                }
                Op::AddChannelBias { x, b } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let tail: usize = xs[2..].iter().product();
                    let mut db = vec![T::ZERO; c];
                    let gd = gy.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * tail;
                            let mut acc = T::ZERO;
                            for &v in &gd[base..base + tail] {
                                acc += v;
                            }
                            db[ci] += acc;
                        }
                    }
                    accum(&mut g, *x, gy.clone());
                    accum(&mut g, *b, Array::new(vec![c], db));
                }
                Op::AddLastBias { x, b } => {
                    let c = self.shape(*b)[0];
                    let mut db = vec![T::ZERO; c];
                    for (i, &v) in gy.data().iter().enumerate() {
                        db[i % c] += v;
                    }
                    accum(&mut g, *x, gy.clone());
                    accum(&mut g, *b, Array::new(vec![c], db));
                }
                Op::Softmax { x } => {
                    let probs = &self.vals[id];
                    let width = *probs.shape().last().unwrap();
                    let rows = probs.numel() / width;
                    let mut dx = vec![T::ZERO; probs.numel()];
                    softmax_backward_rows(probs.data(), gy.data(), rows, width, &mut dx);
                    accum(&mut g, *x, Array::new(self.shape(*x).to_vec(), dx));
                }
                Op::Silu { x } => {
                    let dx = gy.zip(&self.vals[x.0], |g1, v| {
                        let s = T::ONE / (T::ONE + (-v).exp());
                        g1 * (s + v * s * (T::ONE - s))
                    });
                    accum(&mut g, *x, dx);
                }
                Op::NormGroups { x, slice_len, invstd } => {
                    let slice_len = *slice_len;
                    let y = &self.vals[id];
                    let num_slices = y.numel() / slice_len;
                    let m = T::from_f64(slice_len as f64);
                    let mut dx = vec![T::ZERO; y.numel()];
                    let gd = gy.data();
                    let yd = y.data();
                    for s in 0..num_slices {
                        let r = s * slice_len..(s + 1) * slice_len;
                        let gslice = &gd[r.clone()];
                        let yslice = &yd[r.clone()];
                        let mut mean_g = T::ZERO;
                        let mut mean_gy = T::ZERO;
                        for (&gv, &yv) in gslice.iter().zip(yslice.iter()) {
                            mean_g += gv;
                            mean_gy += gv * yv;
                        }
                        mean_g = mean_g / m;
                        mean_gy = mean_gy / m;
                        let istd = invstd[s];
                        for ((o, &gv), &yv) in
                            dx[r].iter_mut().zip(gslice.iter()).zip(yslice.iter())
                        {
                            *o = istd * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accum(&mut g, *x, Array::new(self.shape(*x).to_vec(), dx));
                }
                Op::ChannelScaleShift { x, gamma, beta } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let tail: usize = xs[2..].iter().product();
                    let gd = gy.data();
                    let xd = self.vals[x.0].data();
                    let gammad = self.vals[gamma.0].data();
                    let mut dx = vec![T::ZERO; xd.len()];
                    let mut dgamma = vec![T::ZERO; c];
                    let mut dbeta = vec![T::ZERO; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * tail;
                            let gv = gammad[ci];
                            let mut ag = T::ZERO;
                            let mut ab = T::ZERO;
                            for t in 0..tail {
                                let gy_v = gd[base + t];
                                dx[base + t] = gy_v * gv;
                                ag += gy_v * xd[base + t];
                                ab += gy_v;
                            }
                            dgamma[ci] += ag;
                            dbeta[ci] += ab;
                        }
                    }
                    accum(&mut g, *x, Array::new(xs.to_vec(), dx));
                    accum(&mut g, *gamma, Array::new(vec![c], dgamma));
                    accum(&mut g, *beta, Array::new(vec![c], dbeta));
                }
                Op::Reshape { x } => {
                    let v = Array::new(self.shape(*x).to_vec(), gy.data().to_vec());
                    accum(&mut g, *x, v);
                }
                Op::Permute { x, perm } => {
                    let inv = invert_perm(perm);
                    accum(&mut g, *x, permute_array(&gy, &inv));
                }
                Op::Concat { parts, axis } => {
                    let axis = *axis;
                    let out_shape = self.shape(Tensor(id)).to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut offset = 0usize;
                    for &p in parts {
                        let pa = self.shape(p)[axis];
                        let mut dp = vec![T::ZERO; outer * pa * inner];
                        for o in 0..outer {
                            let src = &gy.data()
                                [o * total * inner + offset * inner..o * total * inner + (offset + pa) * inner];
                            dp[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(src);
                        }
                        accum(&mut g, p, Array::new(self.shape(p).to_vec(), dp));
                        offset += pa;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xs = self.shape(*x).to_vec();
                    let axis = *axis;
                    let start = *start;
                    let len = self.shape(Tensor(id))[axis];
                    let outer: usize = xs[..axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let mut dx = vec![T::ZERO; self.vals[x.0].numel()];
                    for o in 0..outer {
                        let dst = &mut dx
                            [(o * xs[axis] + start) * inner..(o * xs[axis] + start + len) * inner];
                        let src = &gy.data()[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                    accum(&mut g, *x, Array::new(xs, dx));
                }
                Op::RepeatLead { x, n } => {
                    let part = self.vals[x.0].numel();
                    let mut dx = vec![T::ZERO; part];
                    for rep in 0..*n {
                        for (d, &s) in dx.iter_mut().zip(gy.data()[rep * part..(rep + 1) * part].iter()) {
                            *d += s;
                        }
                    }
                    accum(&mut g, *x, Array::new(self.shape(*x).to_vec(), dx));
                }
                Op::UpsampleNearest2 { x } => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![T::ZERO; n * c * h * w];
                    let gd = gy.data();
                    for pc in 0..n * c {
                        let src = &gd[pc * oh * ow..(pc + 1) * oh * ow];
                        let dst = &mut dx[pc * h * w..(pc + 1) * h * w];
                        for y in 0..oh {
                            for x2 in 0..ow {
                                dst[(y / 2) * w + x2 / 2] += src[y * ow + x2];
                            }
                        }
                    }
                    accum(&mut g, *x, Array::new(xs, dx));
                }
                Op::SumAll { x } => {
                    let gv = gy.item();
                    accum(&mut g, *x, Array::full(self.shape(*x), gv));
                }
                Op::MeanAll { x } => {
                    let numel = self.vals[x.0].numel();
                    let gv = gy.item() / T::from_f64(numel as f64);
                    accum(&mut g, *x, Array::full(self.shape(*x), gv));
                }
            }
        }
        Grads { g }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accum<T: Scalar>(g: &mut [Option<Array<T>>], t: Tensor, contrib: Array<T>) {
    match &mut g[t.0] {
        Some(acc) => acc.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn split_batched(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("matmul expects rank 2 or 3, got {shape:?}"),
    }
}

fn batched_shape(a_shape: &[usize], m: usize, n: usize) -> Vec<usize> {
    if a_shape.len() == 2 {
        vec![m, n]
    } else {
        vec![a_shape[0], m, n]
    }
}

fn conv_shape(x: &[usize], w: &[usize], stride: usize, pad: usize) -> ConvShape {
    assert_eq!(x.len(), 4, "conv input must be [N,C,H,W]");
    assert_eq!(w.len(), 4, "conv weight must be [O,C,kh,kw]");
    assert_eq!(x[1], w[1], "conv channel mismatch");
    ConvShape {
        batch: x[0],
        c_in: x[1],
        h: x[2],
        w: x[3],
        c_out: w[0],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
    }
}
