//! 2D convolution and partial convolution (im2col + GEMM), with backward
//! passes for training.
//!
//! Tensors are (N, C, H, W). Partial convolutions take a binary validity
//! mask — either one channel broadcast over the input, or one channel per
//! input channel — renormalize each window by its valid fraction, and emit
//! the propagated mask.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, Axis};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::he_init;
use crate::error::{Error, Result};

pub fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold (C, H, W) into (C*KH*KW, OH*OW) with zero padding.
fn im2col(x: &ArrayView3<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let oh = out_size(h, k, stride, pad);
    let ow = out_size(w, k, stride, pad);
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * ow + oj] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold (C*KH*KW, OH*OW) gradients back onto a (C, H, W) image.
fn col2im(
    cols: &ArrayView2<f32>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f32> {
    let (c, h, w) = shape;
    let oh = out_size(h, k, stride, pad);
    let ow = out_size(w, k, stride, pad);
    let mut img = ndarray::Array3::<f32>::zeros(shape);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                let src = cols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[(ci, ii as usize, jj as usize)] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub dweight: Array4<f32>,
    pub dbias: Array1<f32>,
}

pub struct Conv2dCache {
    cols: Vec<Array2<f32>>,
    in_shape: (usize, usize, usize, usize),
}

/// Plain 2D convolution, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f32>, // (OC, IC, K, K)
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(ic: usize, oc: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            weight: he_init(ndarray::Ix4(oc, ic, k, k), ic * k * k, rng),
            bias: Array1::zeros(oc),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Conv2dCache) {
        let (n, c, h, w) = x.dim();
        let (oc, ic, k, _) = self.weight.dim();
        assert_eq!(c, ic, "input channels {c} != layer channels {ic}");
        let oh = out_size(h, k, self.stride, self.pad);
        let ow = out_size(w, k, self.stride, self.pad);
        let wmat = self.weight.view().into_shape_with_order((oc, ic * k * k)).unwrap();

        let per_sample: Vec<(Array2<f32>, Array2<f32>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = im2col(&x.index_axis(Axis(0), ni), k, self.stride, self.pad);
                let out = wmat.dot(&cols);
                (cols, out)
            })
            .collect();

        let mut y = Array4::<f32>::zeros((n, oc, oh, ow));
        let mut cols_cache = Vec::with_capacity(n);
        for (ni, (cols, out)) in per_sample.into_iter().enumerate() {
            let out = out.into_shape_with_order((oc, oh, ow)).unwrap();
            let mut dst = y.index_axis_mut(Axis(0), ni);
            dst.assign(&out);
            for o in 0..oc {
                dst.slice_mut(s![o, .., ..]).mapv_inplace(|v| v + self.bias[o]);
            }
            cols_cache.push(cols);
        }
        (y, Conv2dCache { cols: cols_cache, in_shape: (n, c, h, w) })
    }

    pub fn backward(&self, dout: &Array4<f32>, cache: &Conv2dCache) -> (Array4<f32>, Conv2dGrads) {
        let (n, c, h, w) = cache.in_shape;
        let (oc, ic, k, _) = self.weight.dim();
        let (_, _, oh, ow) = dout.dim();
        let wmat = self.weight.view().into_shape_with_order((oc, ic * k * k)).unwrap();

        let per_sample: Vec<(Array2<f32>, ndarray::Array3<f32>, Array1<f32>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let dmat = dout
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((oc, oh * ow))
                    .unwrap()
                    .to_owned();
                let dw = dmat.dot(&cache.cols[ni].t());
                let dcols = wmat.t().dot(&dmat);
                let dx = col2im(&dcols.view(), (c, h, w), k, self.stride, self.pad);
                let db = dmat.sum_axis(Axis(1));
                (dw, dx, db)
            })
            .collect();

        let mut dweight = Array2::<f32>::zeros((oc, ic * k * k));
        let mut dbias = Array1::<f32>::zeros(oc);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for (ni, (dw, dxi, db)) in per_sample.into_iter().enumerate() {
            dweight += &dw;
            dbias += &db;
            dx.index_axis_mut(Axis(0), ni).assign(&dxi);
        }
        let dweight = dweight.into_shape_with_order((oc, ic, k, k)).unwrap();
        (dx, Conv2dGrads { dweight, dbias })
    }
}

pub struct PartialConv2dCache {
    cols_xm: Vec<Array2<f32>>,
    /// Renormalization factor per output location (N, OH, OW); zero where the
    /// window saw no valid pixel.
    ratio: ndarray::Array3<f32>,
    mask_bc: Array4<f32>,
    in_shape: (usize, usize, usize, usize),
}

/// Partial convolution: features renormalized per window by
/// `window_ones / sum(mask)`, bias only where the window had valid input,
/// hard zero elsewhere. Returns the propagated single-channel mask.
#[derive(Debug, Clone)]
pub struct PartialConv2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl PartialConv2d {
    pub fn new(ic: usize, oc: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            weight: he_init(ndarray::Ix4(oc, ic, k, k), ic * k * k, rng),
            bias: Array1::zeros(oc),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    /// Broadcast a (N, 1, H, W) mask to (N, C, H, W); per-channel masks pass
    /// through unchanged.
    fn broadcast_mask(mask: &Array4<f32>, c: usize) -> Result<Array4<f32>> {
        let (n, mc, h, w) = mask.dim();
        if mc == c {
            return Ok(mask.clone());
        }
        if mc != 1 {
            return Err(Error::ShapeMismatch(format!(
                "mask has {mc} channels, expected 1 or {c}"
            )));
        }
        let mut out = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            out.slice_mut(s![.., ci, .., ..]).assign(&mask.slice(s![.., 0, .., ..]));
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        x: &Array4<f32>,
        mask: &Array4<f32>,
    ) -> Result<(Array4<f32>, Array4<f32>, PartialConv2dCache)> {
        let (n, c, h, w) = x.dim();
        let (oc, ic, k, _) = self.weight.dim();
        if c != ic {
            return Err(Error::ShapeMismatch(format!("input channels {c} != layer channels {ic}")));
        }
        if (mask.dim().0, mask.dim().2, mask.dim().3) != (n, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask spatial shape {:?} != input {:?}",
                mask.dim(),
                x.dim()
            )));
        }
        let mask_bc = Self::broadcast_mask(mask, c)?;
        let oh = out_size(h, k, self.stride, self.pad);
        let ow = out_size(w, k, self.stride, self.pad);
        let window_ones = (ic * k * k) as f32;
        let wmat = self.weight.view().into_shape_with_order((oc, ic * k * k)).unwrap();

        let xm = x * &mask_bc;

        struct Sample {
            cols: Array2<f32>,
            pre: Array2<f32>,
            ratio: Array2<f32>,
        }
        let per_sample: Vec<Sample> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = im2col(&xm.index_axis(Axis(0), ni), k, self.stride, self.pad);
                let mcols = im2col(&mask_bc.index_axis(Axis(0), ni), k, self.stride, self.pad);
                let pre = wmat.dot(&cols);
                let msum = mcols.sum_axis(Axis(0));
                let ratio = msum
                    .mapv(|s| if s > 0.0 { window_ones / s } else { 0.0 })
                    .into_shape_with_order((oh, ow))
                    .unwrap();
                Sample { cols, pre, ratio }
            })
            .collect();

        let mut y = Array4::<f32>::zeros((n, oc, oh, ow));
        let mut mask_out = Array4::<f32>::zeros((n, 1, oh, ow));
        let mut ratio_all = ndarray::Array3::<f32>::zeros((n, oh, ow));
        let mut cols_cache = Vec::with_capacity(n);
        for (ni, sample) in per_sample.into_iter().enumerate() {
            let pre = sample.pre.into_shape_with_order((oc, oh, ow)).unwrap();
            for o in 0..oc {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let r = sample.ratio[(oi, oj)];
                        y[(ni, o, oi, oj)] =
                            if r > 0.0 { pre[(o, oi, oj)] * r + self.bias[o] } else { 0.0 };
                    }
                }
            }
            for oi in 0..oh {
                for oj in 0..ow {
                    mask_out[(ni, 0, oi, oj)] = if sample.ratio[(oi, oj)] > 0.0 { 1.0 } else { 0.0 };
                }
            }
            ratio_all.index_axis_mut(Axis(0), ni).assign(&sample.ratio);
            cols_cache.push(sample.cols);
        }
        Ok((
            y,
            mask_out,
            PartialConv2dCache { cols_xm: cols_cache, ratio: ratio_all, mask_bc, in_shape: (n, c, h, w) },
        ))
    }

    /// Gradient w.r.t. the masked input and the layer parameters; the mask
    /// and renormalization factors are treated as constants.
    pub fn backward(
        &self,
        dout: &Array4<f32>,
        cache: &PartialConv2dCache,
    ) -> (Array4<f32>, Conv2dGrads) {
        let (n, c, h, w) = cache.in_shape;
        let (oc, ic, k, _) = self.weight.dim();
        let (_, _, oh, ow) = dout.dim();
        let wmat = self.weight.view().into_shape_with_order((oc, ic * k * k)).unwrap();

        let per_sample: Vec<(Array2<f32>, ndarray::Array3<f32>, Array1<f32>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                // dpre = dout * ratio (ratio is 0 on fully-masked windows).
                let mut dpre = Array2::<f32>::zeros((oc, oh * ow));
                let mut db = Array1::<f32>::zeros(oc);
                for o in 0..oc {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let r = cache.ratio[(ni, oi, oj)];
                            let g = dout[(ni, o, oi, oj)];
                            dpre[(o, oi * ow + oj)] = g * r;
                            if r > 0.0 {
                                db[o] += g;
                            }
                        }
                    }
                }
                let dw = dpre.dot(&cache.cols_xm[ni].t());
                let dcols = wmat.t().dot(&dpre);
                let dxm = col2im(&dcols.view(), (c, h, w), k, self.stride, self.pad);
                (dw, dxm, db)
            })
            .collect();

        let mut dweight = Array2::<f32>::zeros((oc, ic * k * k));
        let mut dbias = Array1::<f32>::zeros(oc);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for (ni, (dw, dxm, db)) in per_sample.into_iter().enumerate() {
            dweight += &dw;
            dbias += &db;
            dx.index_axis_mut(Axis(0), ni).assign(&dxm);
        }
        dx *= &cache.mask_bc;
        let dweight = dweight.into_shape_with_order((oc, ic, k, k)).unwrap();
        (dx, Conv2dGrads { dweight, dbias })
    }
}
