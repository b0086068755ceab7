//! Global aggregation (GA) modules: pyramid pooling, atrous spatial pyramid
//! pooling, non-local attention and compact generalized non-local attention.
//!
//! Every module maps an `N x C x H x W` feature map to a context map of the
//! same shape.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, spec_err, Result};
use crate::nn::{bn, conv2d, conv_bn_relu, Conv2dSpec, Ctx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaKind {
    Psp,
    Aspp,
    Nonlocal,
    Cgnl,
    None,
}

impl GaKind {
    pub const ALL: [GaKind; 4] = [GaKind::Psp, GaKind::Aspp, GaKind::Nonlocal, GaKind::Cgnl];

    pub fn as_str(self) -> &'static str {
        match self {
            GaKind::Psp => "psp",
            GaKind::Aspp => "aspp",
            GaKind::Nonlocal => "nonlocal",
            GaKind::Cgnl => "cgnl",
            GaKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaSpec {
    pub kind: GaKind,
    pub channels: usize,
    /// Projection width of the non-local embeddings.
    pub inner_channels: usize,
    /// Channel groups of CGNL.
    pub groups: usize,
    /// Pooled grid sizes of PSP.
    pub bins: Vec<usize>,
    /// ASPP rates: `1` is a 1x1 branch, anything larger a dilated 3x3.
    pub rates: Vec<usize>,
    /// Run the module at half resolution and upsample the result back.
    /// Unset means on for CGNL only.
    pub downsample_input: Option<bool>,
}

impl Default for GaSpec {
    fn default() -> Self {
        Self::new(GaKind::Cgnl, 32)
    }
}

impl GaSpec {
    pub fn new(kind: GaKind, channels: usize) -> Self {
        Self {
            kind,
            channels,
            inner_channels: (channels / 2).max(1),
            groups: 4,
            bins: vec![1, 2, 3, 6],
            rates: vec![1, 6, 12],
            downsample_input: None,
        }
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn downsample(mut self, on: bool) -> Self {
        self.downsample_input = Some(on);
        self
    }

    pub fn downsamples(&self) -> bool {
        self.downsample_input.unwrap_or(self.kind == GaKind::Cgnl)
    }

    /// Fills every optional field with its effective value.
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        s.downsample_input = Some(self.downsamples());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(spec_err("GA channels must be positive"));
        }
        match self.kind {
            GaKind::Psp => {
                if self.bins.is_empty() || self.bins.contains(&0) {
                    return Err(spec_err(format!("PSP bins must be >= 1, got {:?}", self.bins)));
                }
                if !self.channels.is_multiple_of(self.bins.len()) {
                    return Err(spec_err(format!(
                        "PSP: {} channels not divisible by {} branches",
                        self.channels,
                        self.bins.len()
                    )));
                }
            }
            GaKind::Aspp => {
                if self.rates.is_empty() || self.rates.contains(&0) {
                    return Err(spec_err(format!("ASPP rates must be >= 1, got {:?}", self.rates)));
                }
                let branches = self.rates.len() + 1;
                if !self.channels.is_multiple_of(branches) {
                    return Err(spec_err(format!(
                        "ASPP: {} channels not divisible by {branches} branches",
                        self.channels
                    )));
                }
            }
            GaKind::Nonlocal => {
                if self.inner_channels == 0 {
                    return Err(spec_err("non-local inner channels must be >= 1"));
                }
            }
            GaKind::Cgnl => {
                if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
                    return Err(spec_err(format!(
                        "CGNL: {} channels not divisible by {} groups",
                        self.channels, self.groups
                    )));
                }
            }
            GaKind::None => {}
        }
        Ok(())
    }
}

fn check_input(ctx: &Ctx<'_>, x: Var, spec: &GaSpec) -> Result<(usize, usize, usize, usize)> {
    let dims = ctx.tape.value(x).dims4()?;
    if dims.1 != spec.channels {
        return Err(shape_err(format!(
            "GA expects {} channels, got {}",
            spec.channels, dims.1
        )));
    }
    Ok(dims)
}

/// Applies the configured GA variant. `name` prefixes every parameter.
pub fn ga_forward(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<Var> {
    spec.validate()?;
    let (_, _, h, w) = check_input(ctx, x, spec)?;
    if spec.kind == GaKind::None {
        return Ok(x);
    }
    let input = if spec.downsamples() {
        if h < 2 || w < 2 {
            return Err(spec_err(format!("cannot downsample a {h}x{w} map by 2")));
        }
        ctx.tape.bilinear_resize(x, (h.div_ceil(2), w.div_ceil(2)))?
    } else {
        x
    };
    let y = match spec.kind {
        GaKind::Psp => psp_forward(ctx, input, spec, name)?,
        GaKind::Aspp => aspp_forward(ctx, input, spec, name)?,
        GaKind::Nonlocal => nonlocal_forward(ctx, input, spec, name)?,
        GaKind::Cgnl => cgnl_forward(ctx, input, spec, name)?,
        GaKind::None => unreachable!(),
    };
    if spec.downsamples() {
        ctx.tape.bilinear_resize(y, (h, w))
    } else {
        Ok(y)
    }
}

/// Pyramid pooling: each bin size pools to `b x b`, projects to
/// `C / bins` channels and is upsampled back; the concatenated pyramid is
/// fused by a 1x1 conv + BN + ReLU.
///
/// The pooled branches use a biased conv + ReLU without batch norm: a
/// `1 x 1` pooled map has a single value per channel and image.
pub fn psp_forward(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<Var> {
    let (_, c, h, w) = check_input(ctx, x, spec)?;
    let branch_ch = c / spec.bins.len();
    let mut branches = Vec::with_capacity(spec.bins.len());
    for (k, &b) in spec.bins.iter().enumerate() {
        if b > h.min(w) {
            return Err(spec_err(format!("PSP bin {b} exceeds feature size {h}x{w}")));
        }
        let p = ctx.tape.adaptive_avg_pool2d(x, (b, b))?;
        let p = conv2d(ctx, p, &Conv2dSpec::new(c, branch_ch, 1), &format!("{name}.branch{k}"))?;
        let p = ctx.tape.relu(p)?;
        branches.push(ctx.tape.bilinear_resize(p, (h, w))?);
    }
    let cat = ctx.tape.concat(&branches, 1)?;
    conv_bn_relu(ctx, cat, &Conv2dSpec::new(c, c, 1), &format!("{name}.project"))
}

/// Atrous spatial pyramid pooling: a 1x1 branch for rate 1, dilated 3x3
/// branches (padding = rate) for larger rates, and an image-pooling branch.
pub fn aspp_forward(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<Var> {
    let (_, c, h, w) = check_input(ctx, x, spec)?;
    let branch_ch = c / (spec.rates.len() + 1);
    let mut branches = Vec::with_capacity(spec.rates.len() + 1);
    for (k, &r) in spec.rates.iter().enumerate() {
        let conv = if r == 1 {
            Conv2dSpec::new(c, branch_ch, 1)
        } else {
            Conv2dSpec::new(c, branch_ch, 3).dilation(r).padding(r)
        };
        branches.push(conv_bn_relu(ctx, x, &conv, &format!("{name}.branch{k}"))?);
    }
    let pooled = ctx.tape.adaptive_avg_pool2d(x, (1, 1))?;
    let pooled = conv2d(
        ctx,
        pooled,
        &Conv2dSpec::new(c, branch_ch, 1),
        &format!("{name}.image_pool"),
    )?;
    let pooled = ctx.tape.relu(pooled)?;
    branches.push(ctx.tape.bilinear_resize(pooled, (h, w))?);
    let cat = ctx.tape.concat(&branches, 1)?;
    conv_bn_relu(ctx, cat, &Conv2dSpec::new(c, c, 1), &format!("{name}.project"))
}

/// Non-local aggregation before the output projection:
/// `y = g * softmax(theta^T phi)^T`, shape `N x C/2 x H x W`.
pub fn nonlocal_context(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<Var> {
    let (n, c, h, w) = check_input(ctx, x, spec)?;
    let ci = spec.inner_channels;
    let p = h * w;
    let embed = |ctx: &mut Ctx<'_>, which: &str| -> Result<Var> {
        let e = conv2d(ctx, x, &Conv2dSpec::new(c, ci, 1), &format!("{name}.{which}"))?;
        ctx.tape.reshape(e, &[n, ci, p])
    };
    let theta = embed(ctx, "theta")?;
    let phi = embed(ctx, "phi")?;
    let g = embed(ctx, "g")?;
    let theta_t = ctx.tape.transpose(theta)?;
    let logits = ctx.tape.matmul(theta_t, phi)?; // N x P x P, rows are queries
    let affinity = ctx.tape.softmax(logits, 2)?;
    let affinity_t = ctx.tape.transpose(affinity)?;
    let y = ctx.tape.matmul(g, affinity_t)?; // y[c, i] = sum_j A[i, j] g[c, j]
    ctx.tape.reshape(y, &[n, ci, h, w])
}

/// Non-local block with residual: `x + BN(W_out y)`.
pub fn nonlocal_forward(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<Var> {
    let c = spec.channels;
    let y = nonlocal_context(ctx, x, spec, name)?;
    let y = conv2d(
        ctx,
        y,
        &Conv2dSpec::new(spec.inner_channels, c, 1).bias(false),
        &format!("{name}.out"),
    )?;
    let y = bn(ctx, y, &format!("{name}.out_bn"))?;
    ctx.tape.add(x, y)
}

/// Embeddings and per-group statistics of CGNL.
pub struct CgnlParts {
    /// `N x G x P_g` views of the three embeddings.
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
    /// `N x G x 1` statistic `s = (phi . g) / P_g`.
    pub stats: Var,
}

/// Computes the CGNL embeddings and the scalar statistic of each channel
/// group. The linear-kernel affinity `theta phi^T` is applied associatively
/// as `theta (phi^T g)`, so each group collapses to one scalar.
pub fn cgnl_parts(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<CgnlParts> {
    let (n, c, h, w) = check_input(ctx, x, spec)?;
    let groups = spec.groups;
    let pg = c / groups * h * w;
    let embed = |ctx: &mut Ctx<'_>, which: &str| -> Result<Var> {
        let e = conv2d(ctx, x, &Conv2dSpec::new(c, c, 1), &format!("{name}.{which}"))?;
        ctx.tape.reshape(e, &[n, groups, pg])
    };
    let theta = embed(ctx, "theta")?;
    let phi = embed(ctx, "phi")?;
    let g = embed(ctx, "g")?;
    let prod = ctx.tape.mul(phi, g)?;
    let dot = ctx.tape.sum(prod, &[2], true)?;
    let stats = ctx.tape.scale(dot, 1.0 / pg as f64)?;
    Ok(CgnlParts { theta, phi, g, stats })
}

/// CGNL block with residual: `x + BN(W_out (s_g * theta_g))`.
pub fn cgnl_forward(ctx: &mut Ctx<'_>, x: Var, spec: &GaSpec, name: &str) -> Result<Var> {
    let (n, c, h, w) = check_input(ctx, x, spec)?;
    let parts = cgnl_parts(ctx, x, spec, name)?;
    let y = ctx.tape.mul(parts.theta, parts.stats)?;
    let y = ctx.tape.reshape(y, &[n, c, h, w])?;
    let y = conv2d(ctx, y, &Conv2dSpec::new(c, c, 1).bias(false), &format!("{name}.out"))?;
    let y = bn(ctx, y, &format!("{name}.out_bn"))?;
    ctx.tape.add(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, Mode};
    use crate::{Tape, Tensor};

    fn run(spec: &GaSpec, x: &Tensor) -> Tensor {
        let mut p = LayerParams::new(3);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut p, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let y = ga_forward(&mut ctx, xv, spec, "ga").unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn none_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 5, 5], |i| i as f64);
        assert_eq!(run(&GaSpec::new(GaKind::None, 4), &x), x);
    }

    #[test]
    fn every_kind_keeps_shape() {
        let x = Tensor::from_fn(&[1, 8, 8, 8], |i| (i as f64 * 0.1).sin());
        for kind in GaKind::ALL {
            for ds in [true, false] {
                if kind == GaKind::Psp && ds {
                    continue; // bin 6 does not fit a 4x4 map
                }
                let spec = GaSpec::new(kind, 8).downsample(ds);
                assert_eq!(run(&spec, &x).shape(), &[1, 8, 8, 8], "{kind:?}");
            }
        }
    }

    #[test]
    fn validation() {
        assert!(GaSpec::new(GaKind::Cgnl, 6).groups(4).validate().is_err());
        let mut s = GaSpec::new(GaKind::Psp, 8);
        s.bins = vec![0, 2];
        assert!(s.validate().is_err());
        let mut s = GaSpec::new(GaKind::Aspp, 8);
        s.rates = vec![1, 0, 3];
        assert!(s.validate().is_err());
    }

    #[test]
    fn psp_bin_larger_than_map() {
        let x = Tensor::ones(&[1, 4, 4, 4]);
        let spec = GaSpec::new(GaKind::Psp, 4).downsample(false);
        let mut p = LayerParams::new(0);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut p, Mode::Train);
        let xv = ctx.tape.constant(x);
        assert!(ga_forward(&mut ctx, xv, &spec, "ga").is_err());
    }
}
