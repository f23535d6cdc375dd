//! Dense numeric kernels.
//!
//! All kernels compute each output element with a fixed sequential reduction
//! order; rayon only splits work across disjoint output regions, so results
//! are bitwise identical regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let row_job = |i: usize, c_row: &mut [T]| {
        for x in c_row.iter_mut() {
            *x = T::ZERO;
        }
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            let b_row = &b[kk * n..kk * n + n];
            for (cx, &bx) in c_row.iter_mut().zip(b_row.iter()) {
                *cx += a_ik * bx;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    let row_job = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * k..i * k + k];
        for (j, cx) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..j * k + k];
            let mut acc = T::ZERO;
            for (&ax, &bx) in a_row.iter().zip(b_row.iter()) {
                acc += ax * bx;
            }
            *cx = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let row_job = |i: usize, c_row: &mut [T]| {
        for x in c_row.iter_mut() {
            *x = T::ZERO;
        }
        for kk in 0..k {
            let a_ki = a[kk * m + i];
            let b_row = &b[kk * n..kk * n + n];
            for (cx, &bx) in c_row.iter_mut().zip(b_row.iter()) {
                *cx += a_ki * bx;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
}

/// Row-wise numerically stable softmax over the last axis.
/// `rows` rows of length `width`, in place into `out`.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, width: usize, out: &mut [T]) {
    assert_eq!(x.len(), rows * width);
    assert_eq!(out.len(), rows * width);
    let job = |row_in: &[T], row_out: &mut [T]| {
        let mut mx = row_in[0];
        for &v in row_in.iter() {
            mx = mx.maximum(v);
        }
        let mut sum = T::ZERO;
        for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for o in row_out.iter_mut() {
            *o *= inv;
        }
    };
    if rows * width >= PAR_FLOP_THRESHOLD && rows > 1 {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row_out)| job(&x[i * width..(i + 1) * width], row_out));
    } else {
        for (i, row_out) in out.chunks_mut(width).enumerate() {
            job(&x[i * width..(i + 1) * width], row_out);
        }
    }
}

/// Backward of softmax: dx = p ⊙ (dy − Σ_j dy_j p_j) per row.
pub fn softmax_backward_rows<T: Scalar>(
    probs: &[T],
    dy: &[T],
    rows: usize,
    width: usize,
    dx: &mut [T],
) {
    for i in 0..rows {
        let p = &probs[i * width..(i + 1) * width];
        let g = &dy[i * width..(i + 1) * width];
        let o = &mut dx[i * width..(i + 1) * width];
        let mut dot = T::ZERO;
        for (&pj, &gj) in p.iter().zip(g.iter()) {
            dot += pj * gj;
        }
        for ((oj, &pj), &gj) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *oj = pj * (gj - dot);
        }
    }
}

pub struct ConvShape {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Direct 2D convolution (cross-correlation), NCHW layout.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], sh: &ConvShape, y: &mut [T]) {
    let (oh, ow) = (sh.out_h(), sh.out_w());
    assert_eq!(x.len(), sh.batch * sh.c_in * sh.h * sh.w);
    assert_eq!(weight.len(), sh.c_out * sh.c_in * sh.kh * sh.kw);
    assert_eq!(y.len(), sh.batch * sh.c_out * oh * ow);

    let plane_job = |idx: usize, out_plane: &mut [T]| {
        let n = idx / sh.c_out;
        let co = idx % sh.c_out;
        for v in out_plane.iter_mut() {
            *v = T::ZERO;
        }
        for ci in 0..sh.c_in {
            let x_plane = &x[(n * sh.c_in + ci) * sh.h * sh.w..];
            let w_plane = &weight[(co * sh.c_in + ci) * sh.kh * sh.kw..];
            for ki in 0..sh.kh {
                for kj in 0..sh.kw {
                    let wv = w_plane[ki * sh.kw + kj];
                    if wv == T::ZERO {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh.stride + ki) as isize - sh.pad as isize;
                        if iy < 0 || iy >= sh.h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * sh.w..iy as usize * sh.w + sh.w];
                        let o_row = &mut out_plane[oy * ow..oy * ow + ow];
                        for ox in 0..ow {
                            let ix = (ox * sh.stride + kj) as isize - sh.pad as isize;
                            if ix < 0 || ix >= sh.w as isize {
                                continue;
                            }
                            o_row[ox] += wv * x_row[ix as usize];
                        }
                    }
                }
            }
        }
    };

    let plane = oh * ow;
    let work = sh.batch * sh.c_out * sh.c_in * sh.kh * sh.kw * plane;
    if work >= PAR_FLOP_THRESHOLD && sh.batch * sh.c_out > 1 {
        y.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, out_plane)| plane_job(idx, out_plane));
    } else {
        for (idx, out_plane) in y.chunks_mut(plane).enumerate() {
            plane_job(idx, out_plane);
        }
    }
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_input<T: Scalar>(dy: &[T], weight: &[T], sh: &ConvShape, dx: &mut [T]) {
    let (oh, ow) = (sh.out_h(), sh.out_w());
    assert_eq!(dx.len(), sh.batch * sh.c_in * sh.h * sh.w);
    for v in dx.iter_mut() {
        *v = T::ZERO;
    }

    let sample_job = |n: usize, dx_sample: &mut [T]| {
        for co in 0..sh.c_out {
            let dy_plane = &dy[(n * sh.c_out + co) * oh * ow..];
            for ci in 0..sh.c_in {
                let dx_plane = &mut dx_sample[ci * sh.h * sh.w..(ci + 1) * sh.h * sh.w];
                let w_plane = &weight[(co * sh.c_in + ci) * sh.kh * sh.kw..];
                for ki in 0..sh.kh {
                    for kj in 0..sh.kw {
                        let wv = w_plane[ki * sh.kw + kj];
                        if wv == T::ZERO {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh.stride + ki) as isize - sh.pad as isize;
                            if iy < 0 || iy >= sh.h as isize {
                                continue;
                            }
                            let dy_row = &dy_plane[oy * ow..oy * ow + ow];
                            let dx_row =
                                &mut dx_plane[iy as usize * sh.w..iy as usize * sh.w + sh.w];
                            for ox in 0..ow {
                                let ix = (ox * sh.stride + kj) as isize - sh.pad as isize;
                                if ix < 0 || ix >= sh.w as isize {
                                    continue;
                                }
                                dx_row[ix as usize] += wv * dy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    };

    let sample = sh.c_in * sh.h * sh.w;
    if sh.batch > 1 && dy.len() * sh.kh * sh.kw >= PAR_FLOP_THRESHOLD {
        dx.par_chunks_mut(sample)
            .enumerate()
            .for_each(|(n, dx_sample)| sample_job(n, dx_sample));
    } else {
        for (n, dx_sample) in dx.chunks_mut(sample).enumerate() {
            sample_job(n, dx_sample);
        }
    }
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_backward_weight<T: Scalar>(x: &[T], dy: &[T], sh: &ConvShape, dw: &mut [T]) {
    let (oh, ow) = (sh.out_h(), sh.out_w());
    assert_eq!(dw.len(), sh.c_out * sh.c_in * sh.kh * sh.kw);

    let filter_job = |co: usize, dw_filter: &mut [T]| {
        for v in dw_filter.iter_mut() {
            *v = T::ZERO;
        }
        for n in 0..sh.batch {
            let dy_plane = &dy[(n * sh.c_out + co) * oh * ow..];
            for ci in 0..sh.c_in {
                let x_plane = &x[(n * sh.c_in + ci) * sh.h * sh.w..];
                let dwp = &mut dw_filter[ci * sh.kh * sh.kw..(ci + 1) * sh.kh * sh.kw];
                for ki in 0..sh.kh {
                    for kj in 0..sh.kw {
                        let mut acc = T::ZERO;
                        for oy in 0..oh {
                            let iy = (oy * sh.stride + ki) as isize - sh.pad as isize;
                            if iy < 0 || iy >= sh.h as isize {
                                continue;
                            }
                            let dy_row = &dy_plane[oy * ow..oy * ow + ow];
                            let x_row = &x_plane[iy as usize * sh.w..iy as usize * sh.w + sh.w];
                            for ox in 0..ow {
                                let ix = (ox * sh.stride + kj) as isize - sh.pad as isize;
                                if ix < 0 || ix >= sh.w as isize {
                                    continue;
                                }
                                acc += dy_row[ox] * x_row[ix as usize];
                            }
                        }
                        dwp[ki * sh.kw + kj] += acc;
                    }
                }
            }
        }
    };

    let filter = sh.c_in * sh.kh * sh.kw;
    if sh.c_out > 1 && x.len() * sh.kh * sh.kw >= PAR_FLOP_THRESHOLD {
        dw.par_chunks_mut(filter)
            .enumerate()
            .for_each(|(co, dw_filter)| filter_job(co, dw_filter));
    } else {
        for (co, dw_filter) in dw.chunks_mut(filter).enumerate() {
            filter_job(co, dw_filter);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn brute_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_brute_force() {
        let mut rng = RngStream::from_seed(5);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let want = brute_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // B^T given as [n,k]
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut c2);
        for (x, y) in c2.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T given as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c3 = vec![0.0; m * n];
        matmul_tn(&at, &b, m, k, n, &mut c3);
        for (x, y) in c3.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = RngStream::from_seed(11);
        let (rows, width) = (6, 13);
        let x: Vec<f64> = (0..rows * width).map(|_| rng.normal() * 4.0).collect();
        let mut p = vec![0.0; rows * width];
        softmax_rows(&x, rows, width, &mut p);
        for r in 0..rows {
            let s: f64 = p[r * width..(r + 1) * width].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p[r * width..(r + 1) * width].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn conv_forward_matches_brute_force() {
        let mut rng = RngStream::from_seed(17);
        let sh = ConvShape {
            batch: 2,
            c_in: 3,
            h: 6,
            w: 5,
            c_out: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..sh.batch * sh.c_in * sh.h * sh.w)
            .map(|_| rng.normal())
            .collect();
        let w: Vec<f64> = (0..sh.c_out * sh.c_in * 9).map(|_| rng.normal()).collect();
        let (oh, ow) = (sh.out_h(), sh.out_w());
        let mut y = vec![0.0; sh.batch * sh.c_out * oh * ow];
        conv2d_forward(&x, &w, &sh, &mut y);

        for n in 0..sh.batch {
            for co in 0..sh.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..sh.c_in {
                            for ki in 0..3usize {
                                for kj in 0..3usize {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 5 {
                                        continue;
                                    }
                                    acc += x[((n * 3 + ci) * 6 + iy as usize) * 5 + ix as usize]
                                        * w[((co * 3 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        let got = y[((n * sh.c_out + co) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {n},{co},{oy},{ox}");
                    }
                }
            }
        }
    }
}
