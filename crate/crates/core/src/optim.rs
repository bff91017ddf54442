use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive moment estimation over a fixed, ordered list of flat tensors.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    config: AdamConfig,
    step: i32,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update. `params` and `grads` must list the same tensors
    /// in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut [F]>, grads: Vec<&[F]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = &self.config;
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let one = F::one();
        let lr = F::lit(c.learning_rate);
        let eps = F::lit(c.epsilon);
        let bc1 = one - b1.powi(self.step);
        let bc2 = one - b2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "tensor {k}: shape mismatch");
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer)
/// so independent random streams never share a generator state.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cuts `order` into mini-batches of `batch_size`. A trailing batch of a
/// single row is merged into the previous one, since batch normalization
/// cannot train on one sample.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let batch_size = batch_size.max(1);
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let n = out.len();
        let start = (n - 2) * batch_size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}
