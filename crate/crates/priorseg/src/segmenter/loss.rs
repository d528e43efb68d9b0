//! Combined soft-Dice + binary cross-entropy loss with analytic gradient.
//!
//! Computed in f64 from f32 logits; the CE term uses the numerically stable
//! logits formulation. Both terms are equally weighted.

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub const DEFAULT_DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct DiceCeLoss {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub grad: ArrayD<f32>,
}

/// `loss = (1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s)) + mean(BCE)` with
/// `p = sigmoid(logits)`. Shapes must match and the target must be binary.
pub fn dice_ce_loss(logits: &ArrayD<f32>, target: &ArrayD<f32>, smooth: f64) -> Result<DiceCeLoss> {
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invariant(format!("target value {bad} is not binary")));
    }
    let n = logits.len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty loss input".into()));
    }

    let mut probs = Vec::with_capacity(n);
    let mut sum_p = 0.0f64;
    let mut sum_g = 0.0f64;
    let mut sum_pg = 0.0f64;
    let mut ce = 0.0f64;
    for (&l, &g) in logits.iter().zip(target.iter()) {
        let l = l as f64;
        let g = g as f64;
        let p = if l >= 0.0 { 1.0 / (1.0 + (-l).exp()) } else { let e = l.exp(); e / (1.0 + e) };
        probs.push(p);
        sum_p += p;
        sum_g += g;
        sum_pg += p * g;
        // max(l,0) - l*g + ln(1 + exp(-|l|))
        ce += l.max(0.0) - l * g + (-l.abs()).exp().ln_1p();
    }
    ce /= n as f64;
    let a = 2.0 * sum_pg + smooth;
    let b = sum_p + sum_g + smooth;
    let dice = 1.0 - a / b;

    let mut grad = ArrayD::<f32>::zeros(logits.raw_dim());
    let n_f = n as f64;
    for ((dst, &g), &p) in grad.iter_mut().zip(target.iter()).zip(probs.iter()) {
        let g = g as f64;
        let dp = p * (1.0 - p);
        // d(dice)/dp = -(2g*b - a) / b^2
        let ddice_dp = -(2.0 * g * b - a) / (b * b);
        let dce_dl = (p - g) / n_f;
        *dst = (ddice_dp * dp + dce_dl) as f32;
    }
    Ok(DiceCeLoss { total: dice + ce, dice, ce, grad })
}
