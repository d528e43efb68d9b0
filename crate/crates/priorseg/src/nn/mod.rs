//! Minimal CPU neural-network kernels: just what the two networks in this
//! pipeline need, with explicit forward/backward passes.
//!
//! Convolutions go through im2col + GEMM. All layers are deterministic:
//! initialization draws from a caller-seeded ChaCha stream and every
//! accumulation runs in a fixed order.

pub mod conv2d;
pub mod conv3d;
pub mod norm;
pub mod ops;

use ndarray::{Array, Dimension};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub use conv2d::{Conv2d, PartialConv2d};
pub use conv3d::Conv3d;
pub use norm::{BatchNorm2d, InstanceNorm3d, NormMode};

/// Kaiming-style normal init for a fan-in of `fan_in`, via Box-Muller on the
/// given stream.
pub fn he_init<D: Dimension>(shape: D, fan_in: usize, rng: &mut ChaCha20Rng) -> Array<f32, D> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array::from_shape_simple_fn(shape, || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z * std) as f32
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-tensor Adam moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<D: Dimension> {
    pub m: Array<f32, D>,
    pub v: Array<f32, D>,
}

impl<D: Dimension> AdamState<D> {
    pub fn zeros_like(param: &Array<f32, D>) -> Self {
        Self { m: Array::zeros(param.raw_dim()), v: Array::zeros(param.raw_dim()) }
    }

    /// One Adam update with bias correction; `t` is 1-based.
    pub fn step(
        &mut self,
        param: &mut Array<f32, D>,
        grad: &Array<f32, D>,
        lr: f32,
        hp: &AdamHyper,
        t: u64,
    ) {
        let b1 = hp.beta1;
        let b2 = hp.beta2;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + hp.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(x) = (x - 3)^2 elementwise.
        let mut param = Array1::from_elem(4, 10.0f32);
        let mut state = AdamState::zeros_like(&param);
        let hp = AdamHyper::default();
        for t in 1..=2000 {
            let grad = param.mapv(|x| 2.0 * (x - 3.0));
            state.step(&mut param, &grad, 0.05, &hp, t);
        }
        for &x in param.iter() {
            assert!((x - 3.0).abs() < 1e-2, "param stuck at {x}");
        }
    }

    #[test]
    fn he_init_is_seed_deterministic() {
        let a = he_init(ndarray::Ix2(8, 8), 8, &mut ChaCha20Rng::seed_from_u64(5));
        let b = he_init(ndarray::Ix2(8, 8), 8, &mut ChaCha20Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let std = (a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!(std > 0.1 && std < 1.5, "implausible init scale {std}");
    }
}
