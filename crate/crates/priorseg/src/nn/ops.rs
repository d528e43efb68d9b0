//! Elementwise activations, nearest-neighbor upsampling and channel concat.

use ndarray::{s, Array, Array4, Array5, Dimension};

/// Leaky ReLU; `alpha = 0` is plain ReLU. The cache stores the local slope.
#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu {
    pub alpha: f32,
}

impl LeakyRelu {
    pub fn relu() -> Self {
        Self { alpha: 0.0 }
    }

    pub fn forward<D: Dimension>(&self, x: &Array<f32, D>) -> (Array<f32, D>, Array<f32, D>) {
        let slope = x.mapv(|v| if v > 0.0 { 1.0 } else { self.alpha });
        (x * &slope, slope)
    }

    pub fn backward<D: Dimension>(&self, dout: &Array<f32, D>, slope: &Array<f32, D>) -> Array<f32, D> {
        dout * slope
    }
}

/// Clamp to [0, 1] with pass-through gradient strictly inside the interval.
pub fn clamp01_forward<D: Dimension>(x: &Array<f32, D>) -> (Array<f32, D>, Array<f32, D>) {
    let inside = x.mapv(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
    (x.mapv(|v| v.clamp(0.0, 1.0)), inside)
}

pub fn clamp01_backward<D: Dimension>(dout: &Array<f32, D>, inside: &Array<f32, D>) -> Array<f32, D> {
    dout * inside
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn upsample2x_2d(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(ni, ci, i, j)];
                    y[(ni, ci, 2 * i, 2 * j)] = v;
                    y[(ni, ci, 2 * i + 1, 2 * j)] = v;
                    y[(ni, ci, 2 * i, 2 * j + 1)] = v;
                    y[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_2d_backward(dout: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[(ni, ci, i, j)] = dout[(ni, ci, 2 * i, 2 * j)]
                        + dout[(ni, ci, 2 * i + 1, 2 * j)]
                        + dout[(ni, ci, 2 * i, 2 * j + 1)]
                        + dout[(ni, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    dx
}

pub fn upsample2x_3d(x: &Array5<f32>) -> Array5<f32> {
    let (n, c, d, h, w) = x.dim();
    let mut y = Array5::zeros((n, c, 2 * d, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for k in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let v = x[(ni, ci, k, i, j)];
                        for (dk, di, dj) in CUBE_CORNERS {
                            y[(ni, ci, 2 * k + dk, 2 * i + di, 2 * j + dj)] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

const CUBE_CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

pub fn upsample2x_3d_backward(dout: &Array5<f32>) -> Array5<f32> {
    let (n, c, d2, h2, w2) = dout.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut dx = Array5::zeros((n, c, d, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for k in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for (dk, di, dj) in CUBE_CORNERS {
                            acc += dout[(ni, ci, 2 * k + dk, 2 * i + di, 2 * j + dj)];
                        }
                        dx[(ni, ci, k, i, j)] = acc;
                    }
                }
            }
        }
    }
    dx
}

pub fn concat_channels_2d(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut y = Array4::zeros((n, ca + cb, h, w));
    y.slice_mut(s![.., ..ca, .., ..]).assign(a);
    y.slice_mut(s![.., ca.., .., ..]).assign(b);
    y
}

pub fn split_channels_2d(d: &Array4<f32>, ca: usize) -> (Array4<f32>, Array4<f32>) {
    (d.slice(s![.., ..ca, .., ..]).to_owned(), d.slice(s![.., ca.., .., ..]).to_owned())
}

pub fn concat_channels_3d(a: &Array5<f32>, b: &Array5<f32>) -> Array5<f32> {
    let (n, ca, d, h, w) = a.dim();
    let cb = b.dim().1;
    let mut y = Array5::zeros((n, ca + cb, d, h, w));
    y.slice_mut(s![.., ..ca, .., .., ..]).assign(a);
    y.slice_mut(s![.., ca.., .., .., ..]).assign(b);
    y
}

pub fn split_channels_3d(d: &Array5<f32>, ca: usize) -> (Array5<f32>, Array5<f32>) {
    (d.slice(s![.., ..ca, .., .., ..]).to_owned(), d.slice(s![.., ca.., .., .., ..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = Array4::from_shape_fn((1, 2, 3, 4), |(_, c, i, j)| (c * 100 + i * 10 + j) as f32);
        let y = upsample2x_2d(&x);
        assert_eq!(y.dim(), (1, 2, 6, 8));
        assert_eq!(y[(0, 1, 5, 7)], x[(0, 1, 2, 3)]);
        // Backward of an upsampled constant gradient sums the block.
        let dx = upsample2x_2d_backward(&Array4::ones((1, 2, 6, 8)));
        assert!(dx.iter().all(|&v| v == 4.0));
        let dx3 = upsample2x_3d_backward(&Array5::ones((1, 1, 4, 4, 4)));
        assert!(dx3.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn leaky_relu_slope() {
        let act = LeakyRelu { alpha: 0.2 };
        let x = ndarray::arr1(&[-2.0f32, 0.0, 3.0]).into_dyn();
        let (y, slope) = act.forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[-0.4, 0.0, 3.0]);
        let dx = act.backward(&ndarray::ArrayD::ones(x.raw_dim()), &slope);
        assert_eq!(dx.as_slice().unwrap(), &[0.2, 0.2, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
        assert!(sigmoid(-100.0) >= 0.0);
        assert!(sigmoid(100.0) <= 1.0);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Array4::from_elem((1, 2, 3, 3), 1.0);
        let b = Array4::from_elem((1, 3, 3, 3), 2.0);
        let y = concat_channels_2d(&a, &b);
        assert_eq!(y.dim(), (1, 5, 3, 3));
        let (a2, b2) = split_channels_2d(&y, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
