//! Standalone dense attention used by the public `attention` operation and
//! by brute-force oracles in tests.

use firstframe_tensor::kernels::{matmul_nn, matmul_nt, softmax_rows};
use firstframe_tensor::{Array, Scalar};

use crate::error::ModelError;

/// softmax(Q Kᵀ * scale) V on plain 2D matrices.
pub fn attention_dense<T: Scalar>(
    q: &Array<T>,
    k: &Array<T>,
    v: &Array<T>,
    scale: f64,
) -> Result<Array<T>, ModelError> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(ModelError::ShapeMismatch(
            "attention expects 2D Q, K, V".into(),
        ));
    }
    if qs[1] != ks[1] {
        return Err(ModelError::ShapeMismatch(format!(
            "Q dim {} does not match K dim {}",
            qs[1], ks[1]
        )));
    }
    if ks[0] != vs[0] {
        return Err(ModelError::ShapeMismatch(format!(
            "K has {} rows but V has {}",
            ks[0], vs[0]
        )));
    }
    let (tq, d, tk, dv) = (qs[0], qs[1], ks[0], vs[1]);
    let mut scores = vec![T::ZERO; tq * tk];
    matmul_nt(q.data(), k.data(), tq, d, tk, &mut scores);
    let s = T::from_f64(scale);
    for x in scores.iter_mut() {
        *x *= s;
    }
    let mut probs = vec![T::ZERO; tq * tk];
    softmax_rows(&scores, tq, tk, &mut probs);
    let mut out = vec![T::ZERO; tq * dv];
    matmul_nn(&probs, v.data(), tq, tk, dv, &mut out);
    Ok(Array::new(vec![tq, dv], out))
}

/// The probability map alone: softmax(Q Kᵀ * scale), rows stochastic.
pub fn attention_probs<T: Scalar>(
    q: &Array<T>,
    k: &Array<T>,
    scale: f64,
) -> Result<Array<T>, ModelError> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(ModelError::ShapeMismatch(format!(
            "bad Q/K shapes {qs:?} / {ks:?}"
        )));
    }
    let (tq, d, tk) = (qs[0], qs[1], ks[0]);
    let mut scores = vec![T::ZERO; tq * tk];
    matmul_nt(q.data(), k.data(), tq, d, tk, &mut scores);
    let s = T::from_f64(scale);
    for x in scores.iter_mut() {
        *x *= s;
    }
    let mut probs = vec![T::ZERO; tq * tk];
    softmax_rows(&scores, tq, tk, &mut probs);
    Ok(Array::new(vec![tq, tk], probs))
}
