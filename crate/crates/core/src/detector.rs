//! The toy single-shot detector: strided conv backbone with one feature map
//! per anchor level, a shared head trunk, one classification output layer and
//! two regression output layers that share everything except their final
//! layer.

use crate::anchors::AnchorConfig;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::params::ParamSet;
use crate::tensor::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// All convolutions are 3x3 with padding 1.
const K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig<T: Real = f64> {
    pub in_channels: usize,
    pub num_classes: usize,
    /// One entry per stride-2 stem conv; the length must equal
    /// log2(first anchor stride).
    pub backbone_channels: Vec<usize>,
    pub trunk_channels: usize,
    /// Number of shared trunk convs; 0 wires the heads straight to the
    /// backbone (useful for tiny gradient-check models).
    pub trunk_depth: usize,
    /// Build the second (stage-2) regression output layer.
    pub with_second_reg: bool,
    /// Prior foreground probability: the cls bias starts at -ln((1-p)/p) so
    /// early training is not swamped by background loss.
    pub cls_bias_prior: T,
}

impl<T: Real> Default for ModelConfig<T> {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 2,
            backbone_channels: vec![16, 32, 32],
            trunk_channels: 32,
            trunk_depth: 2,
            with_second_reg: true,
            cls_bias_prior: T::c(0.01),
        }
    }
}

impl<T: Real> ModelConfig<T> {
    pub fn validate(&self, anchor_cfg: &AnchorConfig<T>) -> Result<()> {
        anchor_cfg.validate()?;
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("in_channels and num_classes must be positive"));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) || self.trunk_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if !(self.cls_bias_prior > T::zero() && self.cls_bias_prior < T::one()) {
            return Err(Error::invalid("cls_bias_prior must be in (0, 1)"));
        }
        let first = anchor_cfg.levels[0].stride;
        if !first.is_power_of_two() || first < 2 {
            return Err(Error::invalid("first anchor stride must be a power of two >= 2"));
        }
        if 1usize << self.backbone_channels.len() != first {
            return Err(Error::invalid(format!(
                "{} stem convs reach stride {}, but the first anchor level uses stride {first}",
                self.backbone_channels.len(),
                1usize << self.backbone_channels.len(),
            )));
        }
        let mut prev = first;
        for lvl in &anchor_cfg.levels[1..] {
            if lvl.stride != prev * 2 {
                return Err(Error::invalid(
                    "each anchor level stride must double the previous one",
                ));
            }
            prev = lvl.stride;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
}

/// Network outputs flattened to the anchor order of `generate_anchors`:
/// level-major, then row-major cells, then (scale, ratio) slot.
pub struct DetectorOutputs<T: Real = f64> {
    pub cls_logits: Tensor<T>,
    pub offsets_stage1: Tensor<T>,
    pub offsets_stage2: Option<Tensor<T>>,
}

pub struct DetectorModel<T: Real = f64> {
    pub config: ModelConfig<T>,
    pub anchor_cfg: AnchorConfig<T>,
    pub params: ParamSet<T>,
    stem: Vec<ConvLayer>,
    extra_levels: Vec<ConvLayer>,
    trunk: Vec<ConvLayer>,
    cls: ConvLayer,
    reg_stage1: ConvLayer,
    reg_stage2: Option<ConvLayer>,
}

fn add_conv<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut Rng,
    name: &str,
    cout: usize,
    cin: usize,
    bias_init: T,
) -> Result<ConvLayer> {
    // He-normal fan-in init for relu nets.
    let std = T::c((2.0 / (cin * K * K) as f64).sqrt());
    let data: Vec<T> = (0..cout * cin * K * K).map(|_| T::c(rng.normal()) * std).collect();
    let w = params.add(&format!("{name}.weight"), &[cout, cin, K, K], data)?;
    let b = params.add(&format!("{name}.bias"), &[cout], vec![bias_init; cout])?;
    Ok(ConvLayer { w, b })
}

impl<T: Real> DetectorModel<T> {
    /// Builds and initializes the network. Parameter registration order is
    /// fixed (stem, extra levels, trunk, cls, reg stage 1, reg stage 2) so
    /// that models differing only in `with_second_reg` draw identical values
    /// for all shared parameters from the same generator state.
    pub fn new(config: ModelConfig<T>, anchor_cfg: AnchorConfig<T>, rng: &mut Rng) -> Result<Self> {
        config.validate(&anchor_cfg)?;
        let mut params = ParamSet::new();
        let zero = T::zero();

        let mut stem = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.backbone_channels.iter().enumerate() {
            stem.push(add_conv(&mut params, rng, &format!("backbone.{i}"), cout, cin, zero)?);
            cin = cout;
        }
        let level_ch = cin;
        let mut extra_levels = Vec::new();
        for i in 1..anchor_cfg.levels.len() {
            extra_levels.push(add_conv(
                &mut params,
                rng,
                &format!("backbone.level{i}"),
                level_ch,
                level_ch,
                zero,
            )?);
        }
        let mut trunk = Vec::new();
        let mut tin = level_ch;
        for i in 0..config.trunk_depth {
            trunk.push(add_conv(
                &mut params,
                rng,
                &format!("trunk.{i}"),
                config.trunk_channels,
                tin,
                zero,
            )?);
            tin = config.trunk_channels;
        }
        let head_in = tin;
        let a_pc = anchor_cfg.anchors_per_cell();
        let prior = config.cls_bias_prior;
        let cls_bias = -((T::one() - prior) / prior).ln();
        let cls = add_conv(&mut params, rng, "cls", a_pc * config.num_classes, head_in, cls_bias)?;
        let reg_stage1 = add_conv(&mut params, rng, "reg_stage1", a_pc * 4, head_in, zero)?;
        let reg_stage2 = if config.with_second_reg {
            Some(add_conv(&mut params, rng, "reg_stage2", a_pc * 4, head_in, zero)?)
        } else {
            None
        };
        Ok(DetectorModel {
            config,
            anchor_cfg,
            params,
            stem,
            extra_levels,
            trunk,
            cls,
            reg_stage1,
            reg_stage2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs the network on `image` ([1, C, H, W], dims divisible by the
    /// largest stride). Returns the outputs and the parameter leaves uploaded
    /// onto the image's tape, in registration order, for gradient harvesting.
    pub fn forward(&self, image: &Tensor<T>) -> Result<(DetectorOutputs<T>, Vec<Tensor<T>>)> {
        let shape = image.shape().to_vec();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "expected image [1, {}, H, W], got {:?}",
                self.config.in_channels, shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let max_stride = self.anchor_cfg.levels.last().expect("validated").stride;
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by the largest stride {max_stride}"
            )));
        }
        let tape = image.tape();
        let leaves = self.params.upload(&tape);
        let conv = |x: &Tensor<T>, l: &ConvLayer, stride: usize| -> Result<Tensor<T>> {
            x.conv2d(&leaves[l.w], Some(&leaves[l.b]), stride, 1)
        };

        let mut x = image.clone();
        for l in &self.stem {
            x = conv(&x, l, 2)?.relu();
        }
        let mut level_feats = vec![x];
        for l in &self.extra_levels {
            let next = conv(level_feats.last().expect("non-empty"), l, 2)?.relu();
            level_feats.push(next);
        }

        let m = self.config.num_classes;
        let a_pc = self.anchor_cfg.anchors_per_cell();
        let mut cls_rows = Vec::new();
        let mut reg1_rows = Vec::new();
        let mut reg2_rows = Vec::new();
        for feat in &level_feats {
            let mut t = feat.clone();
            for l in &self.trunk {
                t = conv(&t, l, 1)?.relu();
            }
            cls_rows.push(flatten_head(&conv(&t, &self.cls, 1)?, a_pc, m)?);
            reg1_rows.push(flatten_head(&conv(&t, &self.reg_stage1, 1)?, a_pc, 4)?);
            if let Some(reg2) = &self.reg_stage2 {
                reg2_rows.push(flatten_head(&conv(&t, reg2, 1)?, a_pc, 4)?);
            }
        }
        let outputs = DetectorOutputs {
            cls_logits: Tensor::concat(&cls_rows, 0)?,
            offsets_stage1: Tensor::concat(&reg1_rows, 0)?,
            offsets_stage2: if reg2_rows.is_empty() {
                None
            } else {
                Some(Tensor::concat(&reg2_rows, 0)?)
            },
        };
        Ok((outputs, leaves))
    }

    /// Convenience for inference paths that only need values: fresh tape,
    /// single forward pass.
    pub fn forward_image(&self, pixels: &[T], h: usize, w: usize) -> Result<DetectorOutputs<T>> {
        let tape: Tape<T> = Tape::new();
        let image = tape.leaf(&[1, self.config.in_channels, h, w], pixels.to_vec())?;
        let (out, _) = self.forward(&image)?;
        Ok(out)
    }
}

/// Reorders a head map [1, A_pc*M, h, w] into rows [h*w*A_pc, M] matching the
/// anchor order: channel a*M + j holds (slot a, output j), so concatenating
/// per-channel columns and splitting rows yields row index cell*A_pc + slot.
fn flatten_head<T: Real>(map: &Tensor<T>, a_pc: usize, m: usize) -> Result<Tensor<T>> {
    let shape = map.shape().to_vec();
    debug_assert_eq!(shape[1], a_pc * m);
    let hw = shape[2] * shape[3];
    let mut cols = Vec::with_capacity(a_pc * m);
    for ch in 0..a_pc * m {
        cols.push(map.slice(1, ch, 1)?.reshape(&[hw, 1])?);
    }
    Tensor::concat(&cols, 1)?.reshape(&[hw * a_pc, m])
}
