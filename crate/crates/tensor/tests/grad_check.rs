//! Central finite-difference checks for every differentiable tape op.
//!
//! Each case builds a scalar loss from random inputs, compares analytic
//! gradients against (f(x+h) - f(x-h)) / 2h in f64, and requires tight
//! agreement. These checks are the ground truth the rest of the workspace
//! builds on.

use firstframe_tensor::{Array, RngStream, Tape, Tensor};

type T = f64;
const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Builds a loss from a set of input arrays.
type LossFn = dyn Fn(&mut Tape<T>, &[Tensor]) -> Tensor;

fn check_grads(name: &str, inputs: &[Array<T>], f: &LossFn) {
    let mut tape = Tape::new();
    let ids: Vec<Tensor> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape.backward(loss);

    for (which, base) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[which])
            .unwrap_or_else(|| panic!("{name}: missing grad for input {which}"))
            .clone();
        for elem in 0..base.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= H;

            let eval = |arrs: &[Array<T>]| -> f64 {
                let mut t = Tape::no_grad();
                let ids: Vec<Tensor> = arrs.iter().map(|a| t.input(a.clone())).collect();
                let l = f(&mut t, &ids);
                t.value(l).item()
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let an = analytic.data()[elem];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            let rel = (an - fd).abs() / denom;
            assert!(
                rel < TOL,
                "{name}: input {which} elem {elem}: analytic {an} vs fd {fd} (rel {rel})"
            );
        }
    }
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Array<T> {
    rng.fill_normal(shape)
}

#[test]
fn grad_elementwise_ops() {
    let mut rng = RngStream::from_seed(101);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    check_grads("add/mul/sub/neg/scale mix", &[a, b], &|t, ids| {
        let s = t.add(ids[0], ids[1]);
        let m = t.mul(s, ids[0]);
        let d = t.sub(m, ids[1]);
        let n = t.neg(d);
        let sc = t.scale(n, 0.7);
        let sq = t.mul(sc, sc);
        t.mean_all(sq)
    });
}

#[test]
fn grad_matmul_2d_and_batched() {
    let mut rng = RngStream::from_seed(102);
    let a = randn(&mut rng, &[4, 3]);
    let b = randn(&mut rng, &[3, 5]);
    check_grads("matmul 2d", &[a, b], &|t, ids| {
        let c = t.matmul(ids[0], ids[1]);
        let sq = t.mul(c, c);
        t.sum_all(sq)
    });

    let a3 = randn(&mut rng, &[2, 3, 4]);
    let b3 = randn(&mut rng, &[2, 4, 2]);
    check_grads("matmul batched", &[a3, b3], &|t, ids| {
        let c = t.matmul(ids[0], ids[1]);
        let sq = t.mul(c, c);
        t.mean_all(sq)
    });

    let a = randn(&mut rng, &[4, 3]);
    let bt = randn(&mut rng, &[5, 3]);
    check_grads("matmul_nt", &[a, bt], &|t, ids| {
        let c = t.matmul_nt(ids[0], ids[1]);
        let sq = t.mul(c, c);
        t.sum_all(sq)
    });
}

#[test]
fn grad_softmax() {
    let mut rng = RngStream::from_seed(103);
    let x = randn(&mut rng, &[3, 6]);
    let w = randn(&mut rng, &[3, 6]);
    check_grads("softmax", &[x, w], &|t, ids| {
        let p = t.softmax(ids[0]);
        let weighted = t.mul(p, ids[1]);
        let sq = t.mul(weighted, weighted);
        t.sum_all(sq)
    });
}

#[test]
fn grad_conv2d() {
    let mut rng = RngStream::from_seed(104);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    check_grads("conv2d s1 p1", &[x.clone(), w.clone()], &|t, ids| {
        let y = t.conv2d(ids[0], ids[1], 1, 1);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    });
    check_grads("conv2d s2 p1", &[x, w], &|t, ids| {
        let y = t.conv2d(ids[0], ids[1], 2, 1);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    });
}

#[test]
fn grad_bias_ops() {
    let mut rng = RngStream::from_seed(105);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let b = randn(&mut rng, &[3]);
    check_grads("add_channel_bias", &[x, b], &|t, ids| {
        let y = t.add_channel_bias(ids[0], ids[1]);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });

    let x = randn(&mut rng, &[5, 4]);
    let b = randn(&mut rng, &[4]);
    check_grads("add_last_bias", &[x, b], &|t, ids| {
        let y = t.add_last_bias(ids[0], ids[1]);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
}

#[test]
fn grad_silu_and_norm() {
    let mut rng = RngStream::from_seed(106);
    let x = randn(&mut rng, &[2, 4, 3, 3]);
    check_grads("silu", &[x.clone()], &|t, ids| {
        let y = t.silu(ids[0]);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    });

    let gamma = randn(&mut rng, &[4]);
    let beta = randn(&mut rng, &[4]);
    check_grads("norm_groups + affine", &[x, gamma, beta], &|t, ids| {
        let y = t.norm_groups(ids[0], 2, 1e-5);
        let z = t.channel_scale_shift(y, ids[1], ids[2]);
        let s = t.silu(z);
        let sq = t.mul(s, s);
        t.mean_all(sq)
    });
}

#[test]
fn grad_shape_ops() {
    let mut rng = RngStream::from_seed(107);
    let x = randn(&mut rng, &[2, 3, 4]);
    let y = randn(&mut rng, &[2, 2, 4]);
    check_grads("concat + slice + permute + reshape", &[x, y], &|t, ids| {
        let c = t.concat(&[ids[0], ids[1]], 1);
        let p = t.permute(c, &[1, 0, 2]);
        let s = t.slice(p, 0, 1, 3);
        let r = t.reshape(s, vec![3, 8]);
        let sq = t.mul(r, r);
        t.sum_all(sq)
    });

    let x = randn(&mut rng, &[1, 2, 3, 3]);
    check_grads("upsample_nearest2", &[x], &|t, ids| {
        let u = t.upsample_nearest2(ids[0]);
        let sq = t.mul(u, u);
        t.mean_all(sq)
    });

    let x = randn(&mut rng, &[2, 3]);
    check_grads("repeat_lead", &[x], &|t, ids| {
        let r = t.repeat_lead(ids[0], 4);
        let w = t.scale(r, 1.5);
        let sq = t.mul(w, w);
        t.sum_all(sq)
    });
}

#[test]
fn grad_mse_composition() {
    let mut rng = RngStream::from_seed(108);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    check_grads("mse", &[a, b], &|t, ids| t.mse(ids[0], ids[1]));
}

#[test]
fn grad_attention_composition() {
    // Full attention block built from primitives, as the denoiser wires it.
    let mut rng = RngStream::from_seed(109);
    let q = randn(&mut rng, &[2, 3, 4]);
    let k = randn(&mut rng, &[2, 5, 4]);
    let v = randn(&mut rng, &[2, 5, 4]);
    check_grads("attention", &[q, k, v], &|t, ids| {
        let scores = t.matmul_nt(ids[0], ids[1]);
        let scaled = t.scale(scores, 0.5);
        let probs = t.softmax(scaled);
        let out = t.matmul(probs, ids[2]);
        let sq = t.mul(out, out);
        t.mean_all(sq)
    });
}

#[test]
fn no_grad_tape_matches_grad_tape_values() {
    let mut rng = RngStream::from_seed(110);
    let x: Array<f32> = rng.fill_normal(&[2, 3, 4, 4]);
    let w: Array<f32> = rng.fill_normal(&[5, 3, 3, 3]);

    let run = |grad: bool| -> Vec<f32> {
        let mut t: Tape<f32> = if grad { Tape::new() } else { Tape::no_grad() };
        let xi = t.input(x.clone());
        let wi = t.input(w.clone());
        let y = t.conv2d(xi, wi, 1, 1);
        let n = t.norm_groups(y, 1, 1e-5);
        let s = t.silu(n);
        t.value(s).data().to_vec()
    };
    assert_eq!(run(true), run(false));
}
