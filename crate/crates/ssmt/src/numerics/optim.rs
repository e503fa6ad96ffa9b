//! Parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::GradMap;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter tensors plus Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Tensor>,
    moment2: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.moment1
            .insert(name.to_string(), Tensor::zeros(value.rows(), value.cols()));
        self.moment2
            .insert(name.to_string(), Tensor::zeros(value.rows(), value.cols()));
        self.params.insert(name.to_string(), value);
    }

    /// Insert a parameter initialized uniformly in `+-1/sqrt(fan_in)`.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let fan_in = rows.max(1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(rows, cols, data).unwrap());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn restore_moments(
        &mut self,
        moment1: BTreeMap<String, Tensor>,
        moment2: BTreeMap<String, Tensor>,
        step: u64,
    ) {
        self.moment1 = moment1;
        self.moment2 = moment2;
        self.step = step;
    }

    pub(crate) fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.moment1, &self.moment2)
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// entry are treated as having a zero gradient.
    pub fn adam_step(&mut self, grads: &GradMap, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            if g.has_nan() {
                return Err(Error::Numeric(format!("NaN gradient for parameter {name}")));
            }
            if !self.params.contains_key(name) {
                return Err(Error::InvalidArgument(format!(
                    "gradient for unknown parameter {name}"
                )));
            }
            if !self.params[name].same_shape(g) {
                return Err(Error::Shape(format!(
                    "gradient shape mismatch for parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let zero = Tensor::scalar(0.0);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name).unwrap_or(&zero);
            let m = self.moment1.get_mut(name).unwrap();
            let v = self.moment2.get_mut(name).unwrap();
            for i in 0..p.len() {
                let gi = if g.len() == p.len() { g.data()[i] } else { 0.0 };
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row_vec(vec![1.0, -2.0]));
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::zeros(1, 2));
        store.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // theta=0, g=1, lr=0.1: bias-corrected m_hat=1, v_hat=1,
        // theta' = -0.1 / (1 + eps) ~ -0.1
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        store.adam_step(&grads, &cfg).unwrap();
        assert!((store.get("w").scalar_value() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let mut store = ParamStore::new();
        store.insert("layer.w", Tensor::scalar(0.0));
        let mut grads = GradMap::new();
        grads.insert("layer.w".to_string(), Tensor::scalar(f64::NAN));
        let err = store
            .adam_step(&grads, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn descent_on_convex_quadratic() {
        // f(x) = x^2, gradient 2x; two identical-setup steps decrease f.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let f = |s: &ParamStore| s.get("x").scalar_value().powi(2);
        let start = f(&store);
        for _ in 0..2 {
            let x = store.get("x").scalar_value();
            let mut grads = GradMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * x));
            store.adam_step(&grads, &cfg).unwrap();
        }
        assert!(f(&store) < start);
    }
}
