//! 3D convolution (im2col + GEMM) with backward pass. Tensors are
//! (N, C, D, H, W); kernels are cubic with zero padding.

use ndarray::{Array1, Array2, Array4, Array5, ArrayView4, Axis};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::conv2d::out_size;
use super::he_init;

fn im2col3d(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, d, h, w) = x.dim();
    let od = out_size(d, k, stride, pad);
    let oh = out_size(h, k, stride, pad);
    let ow = out_size(w, k, stride, pad);
    let mut cols = Array2::<f32>::zeros((c * k * k * k, od * oh * ow));
    for ci in 0..c {
        for kd in 0..k {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + kd) * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    for odi in 0..od {
                        let dd = (odi * stride + kd) as isize - pad as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let base = (odi * oh + oi) * ow;
                            for oj in 0..ow {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                dst[base + oj] = x[(ci, dd as usize, ii as usize, jj as usize)];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3d(
    cols: &Array2<f32>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (c, d, h, w) = shape;
    let od = out_size(d, k, stride, pad);
    let oh = out_size(h, k, stride, pad);
    let ow = out_size(w, k, stride, pad);
    let mut img = Array4::<f32>::zeros(shape);
    for ci in 0..c {
        for kd in 0..k {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + kd) * k + ki) * k + kj;
                    let src = cols.row(row);
                    for odi in 0..od {
                        let dd = (odi * stride + kd) as isize - pad as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let base = (odi * oh + oi) * ow;
                            for oj in 0..ow {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                img[(ci, dd as usize, ii as usize, jj as usize)] += src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub dweight: Array5<f32>,
    pub dbias: Array1<f32>,
}

pub struct Conv3dCache {
    cols: Vec<Array2<f32>>,
    in_shape: (usize, usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Array5<f32>, // (OC, IC, K, K, K)
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new(ic: usize, oc: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            weight: he_init(ndarray::Ix5(oc, ic, k, k, k), ic * k * k * k, rng),
            bias: Array1::zeros(oc),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array5<f32>) -> (Array5<f32>, Conv3dCache) {
        let (n, c, d, h, w) = x.dim();
        let (oc, ic, k, _, _) = self.weight.dim();
        assert_eq!(c, ic, "input channels {c} != layer channels {ic}");
        let od = out_size(d, k, self.stride, self.pad);
        let oh = out_size(h, k, self.stride, self.pad);
        let ow = out_size(w, k, self.stride, self.pad);
        let wmat = self.weight.view().into_shape_with_order((oc, ic * k * k * k)).unwrap();

        let per_sample: Vec<(Array2<f32>, Array2<f32>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = im2col3d(&x.index_axis(Axis(0), ni), k, self.stride, self.pad);
                let out = wmat.dot(&cols);
                (cols, out)
            })
            .collect();

        let mut y = Array5::<f32>::zeros((n, oc, od, oh, ow));
        let mut cache = Vec::with_capacity(n);
        for (ni, (cols, out)) in per_sample.into_iter().enumerate() {
            let out = out.into_shape_with_order((oc, od, oh, ow)).unwrap();
            let mut dst = y.index_axis_mut(Axis(0), ni);
            dst.assign(&out);
            for o in 0..oc {
                dst.index_axis_mut(Axis(0), o).mapv_inplace(|v| v + self.bias[o]);
            }
            cache.push(cols);
        }
        (y, Conv3dCache { cols: cache, in_shape: (n, c, d, h, w) })
    }

    pub fn backward(&self, dout: &Array5<f32>, cache: &Conv3dCache) -> (Array5<f32>, Conv3dGrads) {
        let (n, c, d, h, w) = cache.in_shape;
        let (oc, ic, k, _, _) = self.weight.dim();
        let (_, _, od, oh, ow) = dout.dim();
        let wmat = self.weight.view().into_shape_with_order((oc, ic * k * k * k)).unwrap();

        let per_sample: Vec<(Array2<f32>, Array4<f32>, Array1<f32>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let dmat = dout
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((oc, od * oh * ow))
                    .unwrap()
                    .to_owned();
                let dw = dmat.dot(&cache.cols[ni].t());
                let dcols = wmat.t().dot(&dmat);
                let dx = col2im3d(&dcols, (c, d, h, w), k, self.stride, self.pad);
                let db = dmat.sum_axis(Axis(1));
                (dw, dx, db)
            })
            .collect();

        let mut dweight = Array2::<f32>::zeros((oc, ic * k * k * k));
        let mut dbias = Array1::<f32>::zeros(oc);
        let mut dx = Array5::<f32>::zeros((n, c, d, h, w));
        for (ni, (dw, dxi, db)) in per_sample.into_iter().enumerate() {
            dweight += &dw;
            dbias += &db;
            dx.index_axis_mut(Axis(0), ni).assign(&dxi);
        }
        let dweight = dweight.into_shape_with_order((oc, ic, k, k, k)).unwrap();
        (dx, Conv3dGrads { dweight, dbias })
    }
}
