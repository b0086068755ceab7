use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::GaldConfig;
use crate::error::{shape_err, spec_err, Result};
use crate::gald::arrangement_forward;
use crate::nn::{conv2d, conv_bn_relu, Conv2dSpec, Ctx, LayerParams, Mode};
use crate::tensor::Tensor;

/// Input resolution over backbone feature resolution.
pub const OUTPUT_STRIDE: usize = 4;

/// Three-stage convolutional backbone. Each stage is two 3x3
/// `conv -> BN -> ReLU` units; stages after the first halve the resolution
/// in their first conv.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_ch: usize,
    pub widths: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            in_ch: 3,
            widths: vec![16, 32, 32],
        }
    }
}

impl BackboneSpec {
    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_ch)
    }

    /// Overall downsampling factor, `2^(stages - 1)`.
    pub fn stride(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(spec_err(format!("backbone {self:?}")));
        }
        Ok(())
    }
}

fn backbone_forward(ctx: &mut Ctx<'_>, x: Var, spec: &BackboneSpec) -> Result<Var> {
    let mut y = x;
    let mut in_ch = spec.in_ch;
    for (s, &width) in spec.widths.iter().enumerate() {
        for j in 0..2 {
            let stride = if s > 0 && j == 0 { 2 } else { 1 };
            let conv = Conv2dSpec::new(in_ch, width, 3).stride(stride).padding(1);
            y = conv_bn_relu(ctx, y, &conv, &format!("backbone.s{s}.conv{j}"))?;
            in_ch = width;
        }
    }
    Ok(y)
}

/// Logits at input resolution and, for arrangements with an LD stage, the
/// mask on the feature map.
pub struct ModelOutput {
    pub logits: Var,
    pub mask: Option<Var>,
}

/// Backbone, context arrangement, then a `3x3 conv -> BN -> ReLU -> 1x1 conv`
/// head whose logits are resized bilinearly to the input size.
pub fn forward_model(ctx: &mut Ctx<'_>, x: Var, cfg: &GaldConfig) -> Result<ModelOutput> {
    cfg.validate()?;
    let (_, c, h, w) = ctx.tape.value(x).dims4()?;
    if c != cfg.backbone.in_ch {
        return Err(shape_err(format!(
            "model takes {} channels, got {c}",
            cfg.backbone.in_ch
        )));
    }
    let stride = cfg.backbone.stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(shape_err(format!(
            "input {h}x{w} is not divisible by the output stride {stride}"
        )));
    }
    let f = backbone_forward(ctx, x, &cfg.backbone)?;
    let arranged = arrangement_forward(ctx, f, cfg.arrangement, &cfg.ga, &cfg.ld)?;
    let width = cfg.arrangement.output_channels(cfg.channels);
    let head = Conv2dSpec::new(width, cfg.channels, 3).padding(1);
    let y = conv_bn_relu(ctx, arranged.features, &head, "head.conv")?;
    let cls = Conv2dSpec::new(cfg.channels, cfg.num_classes, 1);
    let y = conv2d(ctx, y, &cls, "head.cls")?;
    let logits = ctx.tape.bilinear_resize(y, (h, w))?;
    Ok(ModelOutput {
        logits,
        mask: arranged.mask,
    })
}

/// Creates every parameter of the model with one eval-mode pass on a zero
/// image of size `h x w`.
pub fn init_model(cfg: &GaldConfig, params: &mut LayerParams, h: usize, w: usize) -> Result<()> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, Mode::Eval);
    let x = ctx.tape.constant(Tensor::zeros(&[1, cfg.backbone.in_ch, h, w]));
    forward_model(&mut ctx, x, cfg)?;
    Ok(())
}

/// Eval-mode argmax prediction, `N x H x W` class indices. Ties go to the
/// lowest class.
pub fn predict(cfg: &GaldConfig, params: &mut LayerParams, images: &Tensor) -> Result<Vec<u8>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, Mode::Eval);
    let x = ctx.tape.constant(images.clone());
    let out = forward_model(&mut ctx, x, cfg)?;
    Ok(argmax_classes(tape.value(out.logits)))
}

/// Per-pixel argmax over the class axis of `N x K x H x W` logits; ties go to
/// the lowest class.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let (n, k, h, w) = logits.dims4().expect("logits are 4-d");
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
