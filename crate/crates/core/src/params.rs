//! Named parameter storage, tape binding, and optimizers.

use firstframe_tensor::{Array, Grads, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamHandle(pub usize);

/// Ordered, named parameter arrays. Order is part of the artifact contract:
/// checkpoints store arrays by name and reloading matches by name.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, array: Array<T>) -> ParamHandle {
        self.names.push(name.into());
        self.arrays.push(array);
        ParamHandle(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, h: ParamHandle) -> &Array<T> {
        &self.arrays[h.0]
    }

    pub fn get_mut(&mut self, h: ParamHandle) -> &mut Array<T> {
        &mut self.arrays[h.0]
    }

    pub fn name(&self, h: ParamHandle) -> &str {
        &self.names[h.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.arrays.iter())
    }

    pub fn handle_by_name(&self, name: &str) -> Option<ParamHandle> {
        self.names.iter().position(|n| n == name).map(ParamHandle)
    }

    /// Overwrite values matched by name. Errors on unknown names or shape
    /// mismatches so stale checkpoints fail loudly.
    pub fn load_named(&mut self, name: &str, values: Array<T>) -> Result<(), String> {
        let Some(h) = self.handle_by_name(name) else {
            return Err(format!("unknown parameter `{name}`"));
        };
        if self.arrays[h.0].shape() != values.shape() {
            return Err(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                self.arrays[h.0].shape(),
                values.shape()
            ));
        }
        self.arrays[h.0] = values;
        Ok(())
    }

    /// FNV digest over every parameter's f32 bits, for frozen-base checks.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xCBF29CE484222325;
        for a in &self.arrays {
            for &v in a.data() {
                for b in v.to_f32().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001B3);
                }
            }
        }
        h
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-forward memo of which parameters were placed on the tape, so their
/// gradients can be collected after backward.
pub struct ParamBinder {
    bound: Vec<Option<Tensor>>,
}

impl ParamBinder {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        Self {
            bound: vec![None; params.len()],
        }
    }

    pub fn bind<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        h: ParamHandle,
    ) -> Tensor {
        if let Some(t) = self.bound[h.0] {
            return t;
        }
        let t = tape.input(params.get(h).clone());
        self.bound[h.0] = Some(t);
        t
    }

    /// Collect (handle, gradient) pairs for every bound parameter.
    pub fn collect<T: Scalar>(&self, grads: &mut Grads<T>) -> Vec<(ParamHandle, Array<T>)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(t) = slot {
                if let Some(g) = grads.take(*t) {
                    out.push((ParamHandle(i), g));
                }
            }
        }
        out
    }
}

/// Plain stochastic gradient descent with momentum. No adaptive state,
/// so checkpoints stay weight-only.
pub struct SgdMomentum<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Array<T>>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64, param_count: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: (0..param_count).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(ParamHandle, Array<T>)]) {
        let lr = T::from_f64(self.lr);
        let mom = T::from_f64(self.momentum);
        for (h, g) in grads {
            let v = self.velocity[h.0].get_or_insert_with(|| Array::zeros(g.shape()));
            let p = params.get_mut(*h);
            for ((vi, gi), pi) in v
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(p.data_mut().iter_mut())
            {
                *vi = mom * *vi + *gi;
                *pi = *pi - lr * *vi;
            }
        }
    }
}

/// Adam optimizer for one-time base-model pre-training.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Array<T>>>,
    v: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..param_count).map(|_| None).collect(),
            v: (0..param_count).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(ParamHandle, Array<T>)]) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::ONE;
        let eps = T::from_f64(self.eps);
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = T::from_f64(self.lr * bias2.sqrt() / bias1);
        for (h, g) in grads {
            let m = self.m[h.0].get_or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v[h.0].get_or_insert_with(|| Array::zeros(g.shape()));
            let p = params.get_mut(*h);
            for (((mi, vi), gi), pi) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data().iter())
                .zip(p.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                *pi = *pi - step_size * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_hand_rolled_update() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let h = params.add("w", Array::new(vec![2], vec![1.0, -2.0]));
        let mut opt = SgdMomentum::new(0.1, 0.9, params.len());
        let g = Array::new(vec![2], vec![0.5, 1.0]);

        opt.step(&mut params, &[(h, g.clone())]);
        // v = g ; p = p - lr*v
        assert!((params.get(h).data()[0] - (1.0 - 0.05)).abs() < 1e-12);

        opt.step(&mut params, &[(h, g.clone())]);
        // v = 0.9*g + g = 1.9g ; p -= lr*1.9g
        assert!((params.get(h).data()[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let h = params.add("x", Array::new(vec![1], vec![5.0]));
        let mut opt = Adam::new(0.1, params.len());
        for _ in 0..500 {
            let x = params.get(h).data()[0];
            let g = Array::new(vec![1], vec![2.0 * x]);
            opt.step(&mut params, &[(h, g)]);
        }
        assert!(params.get(h).data()[0].abs() < 1e-2);
    }

    #[test]
    fn binder_collects_bound_param_grads() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let hw = params.add("w", Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let _unused = params.add("unused", Array::new(vec![1], vec![3.0]));

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&params);
        let w = binder.bind(&mut tape, &params, hw);
        let x = tape.input(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(x, w);
        let loss = tape.mean_all(y);
        let mut grads = tape.backward(loss);
        let collected = binder.collect(&mut grads);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, hw);
    }
}
