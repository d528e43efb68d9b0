//! Partial-convolution encoder-decoder for slice inpainting.
//!
//! Every encoder stage is a stride-2 partial convolution carrying the
//! validity mask forward; the decoder upsamples features and masks,
//! concatenates the encoder skip (features and masks alike) and applies a
//! stride-1 partial convolution. The last stage merges with the raw input
//! and maps back to 3 channels, clamped to [0, 1].

use std::path::Path;

use ndarray::{Array4, Ix1, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::maskgen::HoleMask;
use crate::nn::conv2d::Conv2dGrads;
use crate::nn::norm::{BatchNorm2d, BatchNorm2dCache, NormGrads, NormMode};
use crate::nn::ops::{
    clamp01_backward, clamp01_forward, concat_channels_2d, split_channels_2d, upsample2x_2d,
    upsample2x_2d_backward, LeakyRelu,
};
use crate::nn::{AdamHyper, AdamState, PartialConv2d};
use crate::slicer::RgbSlice;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintNetConfig {
    /// Encoder depth; total downsampling factor is 2^levels.
    pub levels: usize,
    /// Channels after the first encoder stage; deeper stages double, capped
    /// at 256.
    pub base_width: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for InpaintNetConfig {
    fn default() -> Self {
        Self { levels: 4, base_width: 32, seed: 0 }
    }
}

impl InpaintNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Invariant("inpainting network needs at least 2 levels".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Invariant("base_width must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|i| (self.base_width << i).min(256)).collect()
    }

    pub fn stride_multiple(&self) -> usize {
        1 << self.levels
    }
}

/// Which pass is running; controls batch-norm behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Everything trains.
    One,
    /// Encoder batch-norm frozen (running stats and affine), lower lr.
    Two,
}

struct PConvUnit {
    conv: PartialConv2d,
    adam_w: AdamState<Ix4>,
    adam_b: AdamState<Ix1>,
}

impl PConvUnit {
    fn new(ic: usize, oc: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha20Rng) -> Self {
        let conv = PartialConv2d::new(ic, oc, k, stride, pad, rng);
        let adam_w = AdamState::zeros_like(&conv.weight);
        let adam_b = AdamState::zeros_like(&conv.bias);
        Self { conv, adam_w, adam_b }
    }

    fn step(&mut self, grads: &Conv2dGrads, lr: f32, hp: &AdamHyper, t: u64) {
        self.adam_w.step(&mut self.conv.weight, &grads.dweight, lr, hp, t);
        self.adam_b.step(&mut self.conv.bias, &grads.dbias, lr, hp, t);
    }
}

struct BnUnit {
    bn: BatchNorm2d,
    adam_g: AdamState<Ix1>,
    adam_b: AdamState<Ix1>,
}

impl BnUnit {
    fn new(channels: usize) -> Self {
        let bn = BatchNorm2d::new(channels);
        let adam_g = AdamState::zeros_like(&bn.gamma);
        let adam_b = AdamState::zeros_like(&bn.beta);
        Self { bn, adam_g, adam_b }
    }

    fn step(&mut self, grads: &NormGrads, lr: f32, hp: &AdamHyper, t: u64) {
        self.adam_g.step(&mut self.bn.gamma, &grads.dgamma, lr, hp, t);
        self.adam_b.step(&mut self.bn.beta, &grads.dbeta, lr, hp, t);
    }
}

pub struct InpaintNetwork {
    pub config: InpaintNetConfig,
    enc: Vec<(PConvUnit, Option<BnUnit>)>,
    dec: Vec<(PConvUnit, BnUnit)>,
    final_conv: PConvUnit,
    trained: bool,
    adam_t: u64,
    hp: AdamHyper,
}

struct EncTrace {
    pconv: crate::nn::conv2d::PartialConv2dCache,
    bn: Option<BatchNorm2dCache>,
    slope: Array4<f32>,
}

struct DecTrace {
    pconv: crate::nn::conv2d::PartialConv2dCache,
    bn: BatchNorm2dCache,
    slope: Array4<f32>,
    /// Channel count of the upsampled half of the concat input.
    c_up: usize,
}

pub struct ForwardTrace {
    enc: Vec<EncTrace>,
    dec: Vec<DecTrace>,
    final_pconv: crate::nn::conv2d::PartialConv2dCache,
    final_c_up: usize,
    clamp_inside: Array4<f32>,
}

pub struct GradBundle {
    enc: Vec<(Conv2dGrads, Option<NormGrads>)>,
    dec: Vec<(Conv2dGrads, NormGrads)>,
    final_conv: Conv2dGrads,
}

fn broadcast_mask(mask: &Array4<f32>, c: usize) -> Array4<f32> {
    let (n, _, h, w) = mask.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for ci in 0..c {
        out.slice_mut(ndarray::s![.., ci, .., ..])
            .assign(&mask.slice(ndarray::s![.., 0, .., ..]));
    }
    out
}

impl InpaintNetwork {
    pub fn build(config: InpaintNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let widths = config.widths();
        let levels = config.levels;

        let mut enc = Vec::with_capacity(levels);
        for i in 0..levels {
            let (ic, k, pad) = if i == 0 { (3, 5, 2) } else { (widths[i - 1], 3, 1) };
            let unit = PConvUnit::new(ic, widths[i], k, 2, pad, &mut rng);
            let bn = if i == 0 { None } else { Some(BnUnit::new(widths[i])) };
            enc.push((unit, bn));
        }
        let mut dec = Vec::with_capacity(levels - 1);
        for j in 0..levels - 1 {
            let c_up = widths[levels - 1 - j];
            let c_skip = widths[levels - 2 - j];
            let unit = PConvUnit::new(c_up + c_skip, c_skip, 3, 1, 1, &mut rng);
            dec.push((unit, BnUnit::new(c_skip)));
        }
        let final_conv = PConvUnit::new(widths[0] + 3, 3, 3, 1, 1, &mut rng);
        Ok(Self {
            config,
            enc,
            dec,
            final_conv,
            trained: false,
            adam_t: 0,
            hp: AdamHyper::default(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self) {
        self.trained = true;
    }

    fn check_input(&self, x: &Array4<f32>, mask: &Array4<f32>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {c}")));
        }
        let m = self.config.stride_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} not divisible by the network stride {m}; pad the slice first"
            )));
        }
        if mask.dim() != (n, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} does not match input {:?}",
                mask.dim(),
                x.dim()
            )));
        }
        Ok(())
    }

    /// Training forward pass. Output is clamped to [0, 1].
    pub fn forward(
        &mut self,
        x: &Array4<f32>,
        mask: &Array4<f32>,
        phase: Phase,
    ) -> Result<(Array4<f32>, ForwardTrace)> {
        self.check_input(x, mask)?;
        let levels = self.config.levels;
        let relu = LeakyRelu::relu();
        let lrelu = LeakyRelu { alpha: 0.2 };

        let mut feats: Vec<Array4<f32>> = Vec::with_capacity(levels);
        let mut masks: Vec<Array4<f32>> = Vec::with_capacity(levels);
        let mut enc_traces = Vec::with_capacity(levels);
        let mut cur = x.clone();
        let mut mcur = mask.clone();
        for i in 0..levels {
            let (unit, bn) = &mut self.enc[i];
            let (y, m_out, cache) = unit.conv.forward(&cur, &mcur)?;
            let (y, bn_cache) = match bn {
                Some(b) => {
                    let mode = match phase {
                        Phase::One => NormMode::Train,
                        Phase::Two => NormMode::Frozen,
                    };
                    let (y, c) = b.bn.forward(&y, mode);
                    (y, Some(c))
                }
                None => (y, None),
            };
            let (act, slope) = relu.forward(&y);
            feats.push(act.clone());
            masks.push(m_out.clone());
            enc_traces.push(EncTrace { pconv: cache, bn: bn_cache, slope });
            cur = act;
            mcur = m_out;
        }

        let mut dfeat = feats[levels - 1].clone();
        let mut dmask = masks[levels - 1].clone();
        let mut dec_traces = Vec::with_capacity(levels - 1);
        for j in 0..levels - 1 {
            let skip = levels - 2 - j;
            let up_f = upsample2x_2d(&dfeat);
            let up_m = upsample2x_2d(&dmask);
            let c_up = up_f.dim().1;
            let c_skip = feats[skip].dim().1;
            let x_cat = concat_channels_2d(&up_f, &feats[skip]);
            let m_cat =
                concat_channels_2d(&broadcast_mask(&up_m, c_up), &broadcast_mask(&masks[skip], c_skip));
            let (unit, bn) = &mut self.dec[j];
            let (y, m_out, cache) = unit.conv.forward(&x_cat, &m_cat)?;
            let (y, bn_cache) = bn.bn.forward(&y, NormMode::Train);
            let (act, slope) = lrelu.forward(&y);
            dec_traces.push(DecTrace { pconv: cache, bn: bn_cache, slope, c_up });
            dfeat = act;
            dmask = m_out;
        }

        let up_f = upsample2x_2d(&dfeat);
        let up_m = upsample2x_2d(&dmask);
        let c_up = up_f.dim().1;
        let x_cat = concat_channels_2d(&up_f, x);
        let m_cat = concat_channels_2d(&broadcast_mask(&up_m, c_up), &broadcast_mask(mask, 3));
        let (y_raw, _m_fin, final_cache) = self.final_conv.conv.forward(&x_cat, &m_cat)?;
        let (y, inside) = clamp01_forward(&y_raw);
        Ok((
            y,
            ForwardTrace {
                enc: enc_traces,
                dec: dec_traces,
                final_pconv: final_cache,
                final_c_up: c_up,
                clamp_inside: inside,
            },
        ))
    }

    /// Inference pass (batch-norm running statistics, no mutation).
    pub fn infer(&self, x: &Array4<f32>, mask: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x, mask)?;
        let levels = self.config.levels;
        let relu = LeakyRelu::relu();
        let lrelu = LeakyRelu { alpha: 0.2 };

        let mut feats = Vec::with_capacity(levels);
        let mut masks = Vec::with_capacity(levels);
        let mut cur = x.clone();
        let mut mcur = mask.clone();
        for (unit, bn) in &self.enc {
            let (y, m_out, _) = unit.conv.forward(&cur, &mcur)?;
            let y = match bn {
                Some(b) => b.bn.forward_inference(&y).0,
                None => y,
            };
            let (act, _) = relu.forward(&y);
            feats.push(act.clone());
            masks.push(m_out.clone());
            cur = act;
            mcur = m_out;
        }
        let mut dfeat = feats[levels - 1].clone();
        let mut dmask = masks[levels - 1].clone();
        for (j, (unit, bn)) in self.dec.iter().enumerate() {
            let skip = levels - 2 - j;
            let up_f = upsample2x_2d(&dfeat);
            let up_m = upsample2x_2d(&dmask);
            let c_up = up_f.dim().1;
            let c_skip = feats[skip].dim().1;
            let x_cat = concat_channels_2d(&up_f, &feats[skip]);
            let m_cat =
                concat_channels_2d(&broadcast_mask(&up_m, c_up), &broadcast_mask(&masks[skip], c_skip));
            let (y, m_out, _) = unit.conv.forward(&x_cat, &m_cat)?;
            let y = bn.bn.forward_inference(&y).0;
            let (act, _) = lrelu.forward(&y);
            dfeat = act;
            dmask = m_out;
        }
        let up_f = upsample2x_2d(&dfeat);
        let up_m = upsample2x_2d(&dmask);
        let c_up = up_f.dim().1;
        let x_cat = concat_channels_2d(&up_f, x);
        let m_cat = concat_channels_2d(&broadcast_mask(&up_m, c_up), &broadcast_mask(mask, 3));
        let (y_raw, _, _) = self.final_conv.conv.forward(&x_cat, &m_cat)?;
        Ok(clamp01_forward(&y_raw).0)
    }

    /// Backpropagate a gradient w.r.t. the clamped output.
    pub fn backward(&self, dy: &Array4<f32>, trace: &ForwardTrace) -> GradBundle {
        let levels = self.config.levels;
        let relu = LeakyRelu::relu();
        let lrelu = LeakyRelu { alpha: 0.2 };

        let g = clamp01_backward(dy, &trace.clamp_inside);
        let (g_cat, final_grads) = self.final_conv.conv.backward(&g, &trace.final_pconv);
        let (g_up, _g_input) = split_channels_2d(&g_cat, trace.final_c_up);
        let mut g = upsample2x_2d_backward(&g_up);

        let mut skip_grads: Vec<Option<Array4<f32>>> = (0..levels).map(|_| None).collect();
        let mut dec_grads: Vec<Option<(Conv2dGrads, NormGrads)>> =
            (0..levels - 1).map(|_| None).collect();
        for j in (0..levels - 1).rev() {
            let tr = &trace.dec[j];
            let skip = levels - 2 - j;
            let g_act = lrelu.backward(&g, &tr.slope);
            let (g_bn, bn_grads) = self.dec[j].1.bn.backward(&g_act, &tr.bn);
            let (g_cat, conv_grads) = self.dec[j].0.conv.backward(&g_bn, &tr.pconv);
            let (g_up, g_skip) = split_channels_2d(&g_cat, tr.c_up);
            match &mut skip_grads[skip] {
                Some(acc) => *acc += &g_skip,
                slot => *slot = Some(g_skip),
            }
            dec_grads[j] = Some((conv_grads, bn_grads));
            g = upsample2x_2d_backward(&g_up);
        }

        let mut enc_grads: Vec<Option<(Conv2dGrads, Option<NormGrads>)>> =
            (0..levels).map(|_| None).collect();
        for i in (0..levels).rev() {
            let tr = &trace.enc[i];
            let mut gi = g.clone();
            if let Some(sg) = &skip_grads[i] {
                gi += sg;
            }
            let g_act = relu.backward(&gi, &tr.slope);
            let (g_bn, bn_grads) = match (&self.enc[i].1, &tr.bn) {
                (Some(unit), Some(cache)) => {
                    let (g_bn, grads) = unit.bn.backward(&g_act, cache);
                    (g_bn, Some(grads))
                }
                _ => (g_act, None),
            };
            let (g_in, conv_grads) = self.enc[i].0.conv.backward(&g_bn, &tr.pconv);
            enc_grads[i] = Some((conv_grads, bn_grads));
            g = g_in;
        }

        GradBundle {
            enc: enc_grads.into_iter().map(Option::unwrap).collect(),
            dec: dec_grads.into_iter().map(Option::unwrap).collect(),
            final_conv: final_grads,
        }
    }

    /// Adam update. In phase two the encoder batch-norm affine parameters
    /// are left untouched.
    pub fn step(&mut self, grads: &GradBundle, lr: f32, phase: Phase) {
        self.adam_t += 1;
        let t = self.adam_t;
        let hp = self.hp;
        for (i, (conv_grads, bn_grads)) in grads.enc.iter().enumerate() {
            self.enc[i].0.step(conv_grads, lr, &hp, t);
            if let (Some(unit), Some(g)) = (&mut self.enc[i].1, bn_grads) {
                if phase == Phase::One {
                    unit.step(g, lr, &hp, t);
                }
            }
        }
        for (j, (conv_grads, bn_grads)) in grads.dec.iter().enumerate() {
            self.dec[j].0.step(conv_grads, lr, &hp, t);
            self.dec[j].1.step(bn_grads, lr, &hp, t);
        }
        self.final_conv.step(&grads.final_conv, lr, &hp, t);
    }

    fn tensor_list(&self) -> Vec<(String, ndarray::ArrayD<f32>)> {
        let mut out = Vec::new();
        let push_pconv = |name: &str, u: &PConvUnit, out: &mut Vec<(String, ndarray::ArrayD<f32>)>| {
            out.push((format!("{name}.weight"), u.conv.weight.clone().into_dyn()));
            out.push((format!("{name}.bias"), u.conv.bias.clone().into_dyn()));
            out.push((format!("adam.{name}.weight.m"), u.adam_w.m.clone().into_dyn()));
            out.push((format!("adam.{name}.weight.v"), u.adam_w.v.clone().into_dyn()));
            out.push((format!("adam.{name}.bias.m"), u.adam_b.m.clone().into_dyn()));
            out.push((format!("adam.{name}.bias.v"), u.adam_b.v.clone().into_dyn()));
        };
        let push_bn = |name: &str, u: &BnUnit, out: &mut Vec<(String, ndarray::ArrayD<f32>)>| {
            out.push((format!("{name}.gamma"), u.bn.gamma.clone().into_dyn()));
            out.push((format!("{name}.beta"), u.bn.beta.clone().into_dyn()));
            out.push((format!("{name}.running_mean"), u.bn.running_mean.clone().into_dyn()));
            out.push((format!("{name}.running_var"), u.bn.running_var.clone().into_dyn()));
            out.push((format!("adam.{name}.gamma.m"), u.adam_g.m.clone().into_dyn()));
            out.push((format!("adam.{name}.gamma.v"), u.adam_g.v.clone().into_dyn()));
            out.push((format!("adam.{name}.beta.m"), u.adam_b.m.clone().into_dyn()));
            out.push((format!("adam.{name}.beta.v"), u.adam_b.v.clone().into_dyn()));
        };
        for (i, (unit, bn)) in self.enc.iter().enumerate() {
            push_pconv(&format!("enc{i}"), unit, &mut out);
            if let Some(b) = bn {
                push_bn(&format!("enc{i}.bn"), b, &mut out);
            }
        }
        for (j, (unit, bn)) in self.dec.iter().enumerate() {
            push_pconv(&format!("dec{j}"), unit, &mut out);
            push_bn(&format!("dec{j}.bn"), bn, &mut out);
        }
        push_pconv("final", &self.final_conv, &mut out);
        out
    }

    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "inpainter".into(),
            config: serde_json::to_value(&self.config)
                .map_err(|e| Error::Other(format!("config encode: {e}")))?,
            seed: self.config.seed,
            trained: self.trained,
            extra: serde_json::json!({ "adam_t": self.adam_t, "stage": extra }),
            tensors: vec![],
        };
        checkpoint::save_checkpoint(path, meta, &self.tensor_list())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (meta, tensors) = checkpoint::load_checkpoint(path)?;
        if meta.kind != "inpainter" {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected an inpainter checkpoint, found '{}'", meta.kind),
            });
        }
        let config: InpaintNetConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: format!("config decode: {e}") })?;
        let mut net = Self::build(config)?;
        let map: std::collections::HashMap<String, ndarray::ArrayD<f32>> = tensors.into_iter().collect();
        net.assign_tensors(&map, path)?;
        net.trained = meta.trained;
        net.adam_t = meta.extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        let stage = meta.extra.get("stage").cloned().unwrap_or(serde_json::Value::Null);
        Ok((net, stage))
    }

    fn assign_tensors(
        &mut self,
        map: &std::collections::HashMap<String, ndarray::ArrayD<f32>>,
        path: &Path,
    ) -> Result<()> {
        fn get<'a, D: ndarray::Dimension>(
            map: &'a std::collections::HashMap<String, ndarray::ArrayD<f32>>,
            name: &str,
            path: &Path,
        ) -> Result<ndarray::Array<f32, D>> {
            map.get(name)
                .ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("missing tensor '{name}'"),
                })?
                .clone()
                .into_dimensionality::<D>()
                .map_err(|e| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("tensor '{name}' has wrong rank: {e}"),
                })
        }
        let levels = self.config.levels;
        for i in 0..levels {
            let name = format!("enc{i}");
            let unit = &mut self.enc[i].0;
            unit.conv.weight = get(map, &format!("{name}.weight"), path)?;
            unit.conv.bias = get(map, &format!("{name}.bias"), path)?;
            unit.adam_w.m = get(map, &format!("adam.{name}.weight.m"), path)?;
            unit.adam_w.v = get(map, &format!("adam.{name}.weight.v"), path)?;
            unit.adam_b.m = get(map, &format!("adam.{name}.bias.m"), path)?;
            unit.adam_b.v = get(map, &format!("adam.{name}.bias.v"), path)?;
            if let Some(bn) = &mut self.enc[i].1 {
                let bname = format!("enc{i}.bn");
                bn.bn.gamma = get(map, &format!("{bname}.gamma"), path)?;
                bn.bn.beta = get(map, &format!("{bname}.beta"), path)?;
                bn.bn.running_mean = get(map, &format!("{bname}.running_mean"), path)?;
                bn.bn.running_var = get(map, &format!("{bname}.running_var"), path)?;
                bn.adam_g.m = get(map, &format!("adam.{bname}.gamma.m"), path)?;
                bn.adam_g.v = get(map, &format!("adam.{bname}.gamma.v"), path)?;
                bn.adam_b.m = get(map, &format!("adam.{bname}.beta.m"), path)?;
                bn.adam_b.v = get(map, &format!("adam.{bname}.beta.v"), path)?;
            }
        }
        for j in 0..levels - 1 {
            let name = format!("dec{j}");
            let unit = &mut self.dec[j].0;
            unit.conv.weight = get(map, &format!("{name}.weight"), path)?;
            unit.conv.bias = get(map, &format!("{name}.bias"), path)?;
            unit.adam_w.m = get(map, &format!("adam.{name}.weight.m"), path)?;
            unit.adam_w.v = get(map, &format!("adam.{name}.weight.v"), path)?;
            unit.adam_b.m = get(map, &format!("adam.{name}.bias.m"), path)?;
            unit.adam_b.v = get(map, &format!("adam.{name}.bias.v"), path)?;
            let bn = &mut self.dec[j].1;
            let bname = format!("dec{j}.bn");
            bn.bn.gamma = get(map, &format!("{bname}.gamma"), path)?;
            bn.bn.beta = get(map, &format!("{bname}.beta"), path)?;
            bn.bn.running_mean = get(map, &format!("{bname}.running_mean"), path)?;
            bn.bn.running_var = get(map, &format!("{bname}.running_var"), path)?;
            bn.adam_g.m = get(map, &format!("adam.{bname}.gamma.m"), path)?;
            bn.adam_g.v = get(map, &format!("adam.{bname}.gamma.v"), path)?;
            bn.adam_b.m = get(map, &format!("adam.{bname}.beta.m"), path)?;
            bn.adam_b.v = get(map, &format!("adam.{bname}.beta.v"), path)?;
        }
        self.final_conv.conv.weight = get(map, "final.weight", path)?;
        self.final_conv.conv.bias = get(map, "final.bias", path)?;
        self.final_conv.adam_w.m = get(map, "adam.final.weight.m", path)?;
        self.final_conv.adam_w.v = get(map, "adam.final.weight.v", path)?;
        self.final_conv.adam_b.m = get(map, "adam.final.bias.m", path)?;
        self.final_conv.adam_b.v = get(map, "adam.final.bias.v", path)?;
        Ok(())
    }

    /// Running batch-norm statistics of the encoder, used by tests to verify
    /// the phase-two freeze.
    pub fn encoder_bn_snapshot(&self) -> Vec<(ndarray::Array1<f32>, ndarray::Array1<f32>)> {
        self.enc
            .iter()
            .filter_map(|(_, bn)| {
                bn.as_ref().map(|b| (b.bn.running_mean.clone(), b.bn.running_var.clone()))
            })
            .collect()
    }
}

/// Reflect-pad a (C, H, W) image and its (H, W) mask on the bottom/right so
/// both dimensions are multiples of `m`; returns the padded pair and the
/// original size.
pub fn pad_to_multiple(
    pixels: &ndarray::Array3<f32>,
    mask: &ndarray::Array2<f32>,
    m: usize,
) -> (ndarray::Array3<f32>, ndarray::Array2<f32>, (usize, usize)) {
    let (c, h, w) = pixels.dim();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let reflect = |idx: usize, n: usize| if idx < n { idx } else { 2 * n - 1 - idx };
    let mut out = ndarray::Array3::zeros((c, ph, pw));
    let mut mout = ndarray::Array2::zeros((ph, pw));
    for i in 0..ph {
        for j in 0..pw {
            let (si, sj) = (reflect(i, h), reflect(j, w));
            for ci in 0..c {
                out[(ci, i, j)] = pixels[(ci, si, sj)];
            }
            mout[(i, j)] = mask[(si, sj)];
        }
    }
    (out, mout, (h, w))
}

/// Inpaint one slice: run the network on the masked slice and composite so
/// valid pixels pass through bit-exactly.
pub fn inpaint_slice(net: &InpaintNetwork, slice: &RgbSlice, holes: &HoleMask) -> Result<RgbSlice> {
    if !net.is_trained() {
        return Err(Error::UntrainedNetwork);
    }
    let (h, w) = slice.plane_shape();
    if holes.shape() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "hole mask {:?} does not match slice plane ({h}, {w})",
            holes.shape()
        )));
    }
    let mask_f = holes.to_f32();
    let m = net.config.stride_multiple();
    let (px, mk, _) = pad_to_multiple(&slice.pixels, &mask_f, m);
    let (ph, pw) = (px.dim().1, px.dim().2);
    let x = px.insert_axis(ndarray::Axis(0));
    let mask4 = mk.insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    debug_assert_eq!(x.dim(), (1, 3, ph, pw));
    let y = net.infer(&x, &mask4)?;

    let mut out = slice.pixels.clone();
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                if mask_f[(i, j)] == 0.0 {
                    out[(c, i, j)] = y[(0, c, i, j)];
                }
            }
        }
    }
    RgbSlice::from_network_output(out, slice.z_index, slice.case_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{random_irregular_mask, MaskGenConfig};
    use crate::nn::ops::sigmoid;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn small_config(seed: u64) -> InpaintNetConfig {
        InpaintNetConfig { levels: 2, base_width: 8, seed }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut net = InpaintNetwork::build(InpaintNetConfig { levels: 3, base_width: 8, seed: 1 }).unwrap();
        let x = Array4::from_elem((2, 3, 64, 64), 0.5);
        let mask = Array4::from_elem((2, 1, 64, 64), 1.0);
        let (y, _) = net.forward(&x, &mask, Phase::One).unwrap();
        assert_eq!(y.dim(), (2, 3, 64, 64));
        assert!(y.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut net = InpaintNetwork::build(small_config(1)).unwrap();
        let x = Array4::from_elem((1, 3, 30, 32), 0.5);
        let mask = Array4::from_elem((1, 1, 30, 32), 1.0);
        assert!(matches!(net.forward(&x, &mask, Phase::One), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn one_training_step_decreases_loss_in_most_seeds() {
        use crate::inpaint::loss::{inpaint_loss, FeaturePyramid, InpaintLossWeights};
        let mut wins = 0;
        for seed in 0..10u64 {
            let mut net = InpaintNetwork::build(small_config(seed)).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(100 + seed);
            let target = Array3::from_shape_fn((3, 32, 32), |(c, i, j)| {
                let base = 0.3 + 0.4 * (((i / 8) + (j / 8)) % 2) as f32;
                (base + c as f32 * 0.05 + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)
            });
            let mask2 = {
                let mut m = Array2::from_elem((32, 32), 1.0f32);
                for i in 10..20 {
                    for j in 10..20 {
                        m[(i, j)] = 0.0;
                    }
                }
                m
            };
            let pyr = FeaturePyramid::fixed(7);
            let weights = InpaintLossWeights::default();
            let x = target.clone().insert_axis(ndarray::Axis(0));
            let m4 = mask2.clone().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));

            let eval_loss = |net: &mut InpaintNetwork| -> (f64, GradBundle) {
                let (y, trace) = net.forward(&x, &m4, Phase::One).unwrap();
                let pred = y.index_axis(ndarray::Axis(0), 0).to_owned();
                let (terms, dpred) = inpaint_loss(&pred, &target, &mask2, &weights, Some(&pyr)).unwrap();
                let dy = dpred.insert_axis(ndarray::Axis(0));
                let grads = net.backward(&dy, &trace);
                (terms.total, grads)
            };
            let (before, grads) = eval_loss(&mut net);
            net.step(&grads, 1e-4, Phase::One);
            let (after, _) = eval_loss(&mut net);
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 8, "loss decreased in only {wins}/10 seeds");
    }

    #[test]
    fn composite_never_touches_valid_pixels() {
        let mut net = InpaintNetwork::build(small_config(3)).unwrap();
        // Mark trained so inpaint_slice runs; weights are random but that is
        // irrelevant to the composite contract.
        net.set_trained();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ct = Array2::from_shape_fn((40, 40), |_| rng.gen_range(0.0f32..1.0));
        let pet = Array2::from_shape_fn((40, 40), |_| rng.gen_range(0.0f32..1.0));
        let mut px = Array3::zeros((3, 40, 40));
        px.slice_mut(ndarray::s![0, .., ..]).assign(&ct);
        px.slice_mut(ndarray::s![1, .., ..]).assign(&pet);
        px.slice_mut(ndarray::s![2, .., ..]).assign(&ct);
        let slice = RgbSlice::new(px, 0, "case").unwrap();

        // All-valid mask: output is the input bitwise.
        let all_valid = HoleMask::all_valid((40, 40));
        let out = inpaint_slice(&net, &slice, &all_valid).unwrap();
        assert_eq!(out.pixels, slice.pixels);

        // Random holes: valid pixels still bitwise untouched.
        let mask = random_irregular_mask(
            (40, 40),
            &MaskGenConfig::default(),
            &mut ChaCha20Rng::seed_from_u64(5),
        )
        .unwrap();
        let out = inpaint_slice(&net, &slice, &mask).unwrap();
        let mf = mask.to_f32();
        for c in 0..3 {
            for i in 0..40 {
                for j in 0..40 {
                    if mf[(i, j)] == 1.0 {
                        assert_eq!(out.pixels[(c, i, j)], slice.pixels[(c, i, j)]);
                    }
                }
            }
        }
        assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn untrained_network_refuses_to_inpaint() {
        let net = InpaintNetwork::build(small_config(6)).unwrap();
        let slice = RgbSlice::new(Array3::zeros((3, 32, 32)), 0, "c").unwrap();
        let mask = HoleMask::all_valid((32, 32));
        assert!(matches!(inpaint_slice(&net, &slice, &mask), Err(Error::UntrainedNetwork)));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inp.ckpt");
        let mut net = InpaintNetwork::build(small_config(7)).unwrap();
        net.set_trained();
        net.save_checkpoint(&path, serde_json::json!({"phase": 2})).unwrap();
        let (net2, stage) = InpaintNetwork::load_checkpoint(&path).unwrap();
        assert_eq!(stage["phase"], 2);
        assert!(net2.is_trained());
        let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| {
            sigmoid((c as f32 - 1.0) * 0.3 + (i as f32 - j as f32) * 0.01)
        });
        let mask = Array4::from_elem((1, 1, 32, 32), 1.0);
        let y1 = net.infer(&x, &mask).unwrap();
        let y2 = net2.infer(&x, &mask).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn pad_to_multiple_reflects() {
        let px = Array3::from_shape_fn((1, 5, 6), |(_, i, j)| (i * 10 + j) as f32);
        let mask = Array2::from_elem((5, 6), 1.0f32);
        let (p, m, orig) = pad_to_multiple(&px, &mask, 4);
        assert_eq!(p.dim(), (1, 8, 8));
        assert_eq!(m.dim(), (8, 8));
        assert_eq!(orig, (5, 6));
        assert_eq!(p[(0, 5, 0)], px[(0, 4, 0)]); // reflected row
        assert_eq!(p[(0, 0, 6)], px[(0, 0, 5)]); // reflected col
    }
}
