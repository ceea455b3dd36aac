//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use indexmap::IndexMap;

use crate::numeric::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    pub t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { weight_decay, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update over every (param, gradient) pair. lr = 0 leaves the
    /// parameters unchanged (the decay term is lr-scaled too).
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor>,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            let n = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * data[i]);
            }
        }
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn export_moments(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (name, m) in &self.m {
            out.push((format!("opt.m.{name}"), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("opt.v.{name}"), v.clone()));
        }
        out
    }

    pub fn import_moment(&mut self, key: &str, values: Vec<f64>) -> bool {
        if let Some(name) = key.strip_prefix("opt.m.") {
            self.m.insert(name.to_string(), values);
            true
        } else if let Some(name) = key.strip_prefix("opt.v.") {
            self.v.insert(name.to_string(), values);
            true
        } else {
            false
        }
    }
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|&x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_map(vals: &[f64]) -> IndexMap<String, Tensor> {
        let mut m = IndexMap::new();
        m.insert("w".to_string(), Tensor::from_vec(vals.to_vec()).with_grad());
        m
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut params = param_map(&[1.0, -2.0, 3.0]);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![10.0, -5.0, 1.0]);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut params, &grads, 0.0);
        assert_eq!(params["w"].data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn step_moves_against_gradient() {
        let mut params = param_map(&[0.0]);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut params, &grads, 0.1);
        // First AdamW step with unit gradient moves by ≈ lr.
        assert!((params["w"].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), vec![3.0, 0.0]);
        grads.insert("b".to_string(), vec![0.0, 4.0]);
        let pre = clip_global_norm(&mut grads, 1.0);
        assert_eq!(pre, 5.0);
        let post: f64 = grads.values().flat_map(|g| g.iter()).map(|&x| x * x).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-9);
        assert!((post - 1.0).abs() < 1e-12);

        let mut small = IndexMap::new();
        small.insert("a".to_string(), vec![0.1]);
        let pre = clip_global_norm(&mut small, 1.0);
        assert!((pre - 0.1).abs() < 1e-15);
        assert_eq!(small["a"], vec![0.1]); // untouched below the cap
    }

    #[test]
    fn moment_export_import_round_trip() {
        let mut params = param_map(&[1.0, 2.0]);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.5]);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut params, &grads, 0.01);

        let mut restored = AdamW::new(0.01);
        restored.t = opt.t;
        for (key, vals) in opt.export_moments() {
            assert!(restored.import_moment(&key, vals));
        }
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        opt.step(&mut p1, &grads, 0.01);
        restored.step(&mut p2, &grads, 0.01);
        assert_eq!(p1["w"].data(), p2["w"].data());
    }
}
