//! Batch normalization (2D) and instance normalization (3D).

use ndarray::{Array1, Array4, Array5, Axis};

/// How a normalization layer behaves during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running stats updated; affine gradients produced.
    Train,
    /// Running statistics; nothing updated.
    Eval,
    /// Running statistics; affine gradients suppressed. Used when the
    /// encoder's normalization is frozen in the second training phase.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BatchNorm2dCache {
    xhat: Array4<f32>,
    invstd: Array1<f32>,
    mode: NormMode,
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub dgamma: Array1<f32>,
    pub dbeta: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Eval-path forward that never touches running statistics; usable from
    /// shared references for concurrent inference.
    pub fn forward_inference(&self, x: &Array4<f32>) -> (Array4<f32>, BatchNorm2dCache) {
        let c = x.dim().1;
        let mut xhat = Array4::<f32>::zeros(x.raw_dim());
        let mut invstd = Array1::<f32>::zeros(c);
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        for ci in 0..c {
            let mean = self.running_mean[ci];
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            invstd[ci] = istd;
            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            ndarray::Zip::from(xhat.index_axis_mut(Axis(1), ci))
                .and(y.index_axis_mut(Axis(1), ci))
                .and(x.index_axis(Axis(1), ci))
                .for_each(|xh, yy, &xv| {
                    *xh = (xv - mean) * istd;
                    *yy = gamma * *xh + beta;
                });
        }
        (y, BatchNorm2dCache { xhat, invstd, mode: NormMode::Eval })
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: NormMode) -> (Array4<f32>, BatchNorm2dCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f32;
        let mut xhat = Array4::<f32>::zeros(x.raw_dim());
        let mut invstd = Array1::<f32>::zeros(c);
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mean = xc.sum() / m;
                    let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / m;
                    self.running_mean[ci] =
                        (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                    self.running_var[ci] =
                        (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                    (mean, var)
                }
                NormMode::Eval | NormMode::Frozen => (self.running_mean[ci], self.running_var[ci]),
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            invstd[ci] = istd;
            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            ndarray::Zip::from(xhat.index_axis_mut(Axis(1), ci))
                .and(y.index_axis_mut(Axis(1), ci))
                .and(xc)
                .for_each(|xh, yy, &xv| {
                    *xh = (xv - mean) * istd;
                    *yy = gamma * *xh + beta;
                });
        }
        (y, BatchNorm2dCache { xhat, invstd, mode })
    }

    pub fn backward(&self, dout: &Array4<f32>, cache: &BatchNorm2dCache) -> (Array4<f32>, NormGrads) {
        let (n, c, h, w) = dout.dim();
        let m = (n * h * w) as f32;
        let mut dx = Array4::<f32>::zeros(dout.raw_dim());
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let dc = dout.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_d: f32 = dc.sum();
            let sum_dxh: f32 = dc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            match cache.mode {
                NormMode::Train => {
                    dgamma[ci] = sum_dxh;
                    dbeta[ci] = sum_d;
                    let g = self.gamma[ci];
                    let istd = cache.invstd[ci];
                    ndarray::Zip::from(dx.index_axis_mut(Axis(1), ci))
                        .and(dc)
                        .and(xh)
                        .for_each(|dxv, &dv, &xhv| {
                            *dxv = g * istd * (dv - sum_d / m - xhv * sum_dxh / m);
                        });
                }
                NormMode::Eval | NormMode::Frozen => {
                    // Running stats are constants: plain affine chain rule.
                    let g = self.gamma[ci];
                    let istd = cache.invstd[ci];
                    ndarray::Zip::from(dx.index_axis_mut(Axis(1), ci)).and(dc).for_each(
                        |dxv, &dv| {
                            *dxv = g * istd * dv;
                        },
                    );
                    if cache.mode == NormMode::Eval {
                        dgamma[ci] = sum_dxh;
                        dbeta[ci] = sum_d;
                    }
                    // Frozen: affine gradients stay zero so a uniform
                    // optimizer step is a no-op for this layer.
                }
            }
        }
        (dx, NormGrads { dgamma, dbeta })
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm3d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

pub struct InstanceNorm3dCache {
    xhat: Array5<f32>,
    invstd: ndarray::Array2<f32>, // (N, C)
}

impl InstanceNorm3d {
    pub fn new(channels: usize) -> Self {
        Self { gamma: Array1::ones(channels), beta: Array1::zeros(channels), eps: 1e-5 }
    }

    /// Instance statistics are used in training and inference alike.
    pub fn forward(&self, x: &Array5<f32>) -> (Array5<f32>, InstanceNorm3dCache) {
        let (n, c, d, h, w) = x.dim();
        let m = (d * h * w) as f32;
        let mut xhat = Array5::<f32>::zeros(x.raw_dim());
        let mut y = Array5::<f32>::zeros(x.raw_dim());
        let mut invstd = ndarray::Array2::<f32>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let xc = x.slice(ndarray::s![ni, ci, .., .., ..]);
                let mean = xc.sum() / m;
                let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / m;
                let istd = 1.0 / (var + self.eps).sqrt();
                invstd[(ni, ci)] = istd;
                let gamma = self.gamma[ci];
                let beta = self.beta[ci];
                ndarray::Zip::from(xhat.slice_mut(ndarray::s![ni, ci, .., .., ..]))
                    .and(y.slice_mut(ndarray::s![ni, ci, .., .., ..]))
                    .and(xc)
                    .for_each(|xh, yy, &xv| {
                        *xh = (xv - mean) * istd;
                        *yy = gamma * *xh + beta;
                    });
            }
        }
        (y, InstanceNorm3dCache { xhat, invstd })
    }

    pub fn backward(
        &self,
        dout: &Array5<f32>,
        cache: &InstanceNorm3dCache,
    ) -> (Array5<f32>, NormGrads) {
        let (n, c, d, h, w) = dout.dim();
        let m = (d * h * w) as f32;
        let mut dx = Array5::<f32>::zeros(dout.raw_dim());
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        for ni in 0..n {
            for ci in 0..c {
                let dc = dout.slice(ndarray::s![ni, ci, .., .., ..]);
                let xh = cache.xhat.slice(ndarray::s![ni, ci, .., .., ..]);
                let sum_d: f32 = dc.sum();
                let sum_dxh: f32 = dc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                dgamma[ci] += sum_dxh;
                dbeta[ci] += sum_d;
                let g = self.gamma[ci];
                let istd = cache.invstd[(ni, ci)];
                ndarray::Zip::from(dx.slice_mut(ndarray::s![ni, ci, .., .., ..]))
                    .and(dc)
                    .and(xh)
                    .for_each(|dxv, &dv, &xhv| {
                        *dxv = g * istd * (dv - sum_d / m - xhv * sum_dxh / m);
                    });
            }
        }
        (dx, NormGrads { dgamma, dbeta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn train_mode_normalizes_per_channel() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let mut bn = BatchNorm2d::new(3);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| r.gen_range(-3.0f32..9.0));
        let (y, _) = bn.forward(&x, NormMode::Train);
        for c in 0..3 {
            let yc = y.index_axis(Axis(1), c);
            let m = yc.sum() / yc.len() as f32;
            let v = yc.iter().map(|&e| (e - m) * (e - m)).sum::<f32>() / yc.len() as f32;
            assert!(m.abs() < 1e-4, "channel {c} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel {c} var {v}");
        }
    }

    #[test]
    fn frozen_mode_leaves_running_stats_untouched() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let mut bn = BatchNorm2d::new(2);
        let x = Array4::from_shape_fn((2, 2, 4, 4), |_| r.gen_range(-1.0f32..1.0));
        bn.forward(&x, NormMode::Train);
        let rm = bn.running_mean.clone();
        let rv = bn.running_var.clone();
        let x2 = Array4::from_shape_fn((2, 2, 4, 4), |_| r.gen_range(5.0f32..9.0));
        let (_, cache) = bn.forward(&x2, NormMode::Frozen);
        assert_eq!(bn.running_mean, rm);
        assert_eq!(bn.running_var, rv);
        let g = Array4::ones((2, 2, 4, 4));
        let (_, grads) = bn.backward(&g, &cache);
        assert!(grads.dgamma.iter().all(|&v| v == 0.0));
        assert!(grads.dbeta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma[0] = 1.3;
        bn.beta[1] = -0.4;
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| r.gen_range(-1.0f32..1.0));
        let g = Array4::from_shape_fn((2, 2, 3, 3), |_| r.gen_range(-1.0f32..1.0));
        let (_, cache) = bn.clone().forward(&x, NormMode::Train);
        let (dx, _) = bn.backward(&g, &cache);
        let loss = |x: &Array4<f32>| -> f64 {
            let (y, _) = bn.clone().forward(x, NormMode::Train);
            y.iter().zip(g.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let h = 1e-3f32;
        for probe in [(0usize, 0usize, 1usize, 1usize), (1, 1, 2, 0)] {
            let mut xp = x.clone();
            xp[probe] += h;
            let mut xm = x.clone();
            xm[probe] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = dx[probe] as f64;
            assert!((fd - an).abs() < 2e-2 * an.abs().max(1.0), "dx {an} vs fd {fd}");
        }
    }

    #[test]
    fn instancenorm_gradient_matches_finite_differences() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let mut inorm = InstanceNorm3d::new(2);
        inorm.gamma[1] = 0.7;
        let x = Array5::from_shape_fn((2, 2, 3, 3, 3), |_| r.gen_range(-1.0f32..1.0));
        let g = Array5::from_shape_fn((2, 2, 3, 3, 3), |_| r.gen_range(-1.0f32..1.0));
        let (_, cache) = inorm.forward(&x);
        let (dx, _) = inorm.backward(&g, &cache);
        let loss = |x: &Array5<f32>| -> f64 {
            let (y, _) = inorm.forward(x);
            y.iter().zip(g.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let h = 1e-3f32;
        for probe in [(0usize, 0usize, 1usize, 1usize, 1usize), (1, 1, 2, 0, 2)] {
            let mut xp = x.clone();
            xp[probe] += h;
            let mut xm = x.clone();
            xm[probe] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = dx[probe] as f64;
            assert!((fd - an).abs() < 2e-2 * an.abs().max(1.0), "dx {an} vs fd {fd}");
        }
    }
}
