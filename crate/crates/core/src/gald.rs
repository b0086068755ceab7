//! Local distribution (LD) of global context and the arrangements of GA and
//! LD compared in the ablations.
//!
//! LD estimates one mask map per channel from a feature map,
//! `M = sigmoid(upsample(W_d F))`, where `W_d` is a cascade of depth-wise
//! convolutions that reduces resolution by `d`. The mask gates the global
//! features as `F_GALD = M * F_GA + F_GA`, and the head sees
//! `concat(F_GALD, F)`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::context::{ga_forward, GaSpec};
use crate::error::{shape_err, spec_err, Error, Result};
use crate::nn::{conv2d, Conv2dSpec, Ctx};

/// How LD reduces resolution before the depth-wise filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdStrategy {
    /// `log2(d)` depth-wise convolutions with stride 2.
    DepthwiseStrideConv,
    /// Bilinear resize to `1/d`, then stride-1 depth-wise convolutions.
    Bilinear,
    /// Adaptive average pooling to `1/d`, then stride-1 depth-wise convolutions.
    AvgPool,
}

impl LdStrategy {
    pub const ALL: [LdStrategy; 3] = [
        LdStrategy::DepthwiseStrideConv,
        LdStrategy::Bilinear,
        LdStrategy::AvgPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LdStrategy::DepthwiseStrideConv => "depthwise_stride_conv",
            LdStrategy::Bilinear => "bilinear",
            LdStrategy::AvgPool => "avg_pool",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdSpec {
    pub strategy: LdStrategy,
    /// Downsampling ratio, a power of two.
    pub d: usize,
    /// Odd kernel size of the depth-wise filters.
    pub kernel: usize,
}

impl Default for LdSpec {
    fn default() -> Self {
        Self {
            strategy: LdStrategy::DepthwiseStrideConv,
            d: 8,
            kernel: 3,
        }
    }
}

impl LdSpec {
    pub fn new(strategy: LdStrategy, d: usize) -> Self {
        Self {
            strategy,
            d,
            ..Self::default()
        }
    }

    /// Number of depth-wise stages, `log2(d)`.
    pub fn stages(&self) -> usize {
        self.d.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || !self.d.is_power_of_two() {
            return Err(spec_err(format!("LD ratio {} is not a power of two >= 2", self.d)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(spec_err(format!("LD kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// GA then LD.
    Gald,
    /// LD on the input, then GA.
    Ldga,
    /// LD and GA side by side, fused by a 1x1 conv.
    Parallel,
    GaOnly,
    LdOnly,
    /// No context module; the head sees the backbone feature directly.
    Baseline,
}

impl Arrangement {
    pub const ALL: [Arrangement; 6] = [
        Arrangement::Gald,
        Arrangement::Ldga,
        Arrangement::Parallel,
        Arrangement::GaOnly,
        Arrangement::LdOnly,
        Arrangement::Baseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arrangement::Gald => "gald",
            Arrangement::Ldga => "ldga",
            Arrangement::Parallel => "parallel",
            Arrangement::GaOnly => "ga_only",
            Arrangement::LdOnly => "ld_only",
            Arrangement::Baseline => "baseline",
        }
    }

    pub fn has_ld(self) -> bool {
        matches!(
            self,
            Arrangement::Gald | Arrangement::Ldga | Arrangement::Parallel | Arrangement::LdOnly
        )
    }

    pub fn has_ga(self) -> bool {
        matches!(
            self,
            Arrangement::Gald | Arrangement::Ldga | Arrangement::Parallel | Arrangement::GaOnly
        )
    }

    /// Channels handed to the head for a `C`-channel feature.
    pub fn output_channels(self, c: usize) -> usize {
        match self {
            Arrangement::Baseline => c,
            _ => 2 * c,
        }
    }
}

/// Per-channel mask maps in `(0, 1)`, same shape as the LD input.
pub fn ld_mask(ctx: &mut Ctx<'_>, f_in: Var, spec: &LdSpec, name: &str) -> Result<Var> {
    spec.validate()?;
    let (_, c, h, w) = ctx.tape.value(f_in).dims4()?;
    if h < spec.d || w < spec.d {
        return Err(spec_err(format!(
            "LD ratio {} needs a feature map of at least {0}x{0}, got {h}x{w}",
            spec.d
        )));
    }
    let stages = spec.stages();
    let pad = spec.kernel / 2;
    let (lh, lw) = (h.div_ceil(spec.d), w.div_ceil(spec.d));
    let (mut y, stride) = match spec.strategy {
        LdStrategy::DepthwiseStrideConv => (f_in, 2),
        LdStrategy::Bilinear => (ctx.tape.bilinear_resize(f_in, (lh, lw))?, 1),
        LdStrategy::AvgPool => (ctx.tape.adaptive_avg_pool2d(f_in, (lh, lw))?, 1),
    };
    for s in 0..stages {
        let conv = Conv2dSpec::depthwise(c, spec.kernel).stride(stride).padding(pad);
        y = conv2d(ctx, y, &conv, &format!("{name}.dw{s}"))?;
        if s + 1 < stages {
            y = ctx.tape.relu(y)?;
        }
    }
    let y = ctx.tape.bilinear_resize(y, (h, w))?;
    ctx.tape.sigmoid(y)
}

/// `m * f_ga + f_ga`.
pub fn ld_distribute(ctx: &mut Ctx<'_>, f_ga: Var, m: Var) -> Result<Var> {
    if ctx.tape.shape(f_ga) != ctx.tape.shape(m) {
        return Err(shape_err(format!(
            "mask {:?} does not match features {:?}",
            ctx.tape.shape(m),
            ctx.tape.shape(f_ga)
        )));
    }
    let gated = ctx.tape.mul(m, f_ga)?;
    ctx.tape.add(gated, f_ga)
}

/// Channel concat with the distributed features first: `concat(F_GALD, F)`.
pub fn gald_fuse(ctx: &mut Ctx<'_>, f: Var, f_gald: Var) -> Result<Var> {
    if ctx.tape.shape(f) != ctx.tape.shape(f_gald) {
        return Err(shape_err(format!(
            "fuse {:?} with {:?}",
            ctx.tape.shape(f_gald),
            ctx.tape.shape(f)
        )));
    }
    ctx.tape.concat(&[f_gald, f], 1)
}

/// Channel mean of a mask, `N x 1 x H x W`.
pub fn mask_summary(ctx: &mut Ctx<'_>, m: Var) -> Result<Var> {
    ctx.tape.mean(m, &[1], true)
}

/// Result of an arrangement: the features for the head and, when the
/// arrangement has an LD stage, its mask.
pub struct ArrangementOutput {
    pub features: Var,
    pub mask: Option<Var>,
}

/// Composes GA and LD as `arr` prescribes. Parameters live under `ga.`,
/// `ld.` and (parallel only) `fuse.`. Every arrangement except the baseline
/// returns `2C` channels; the baseline returns `f` unchanged.
pub fn arrangement_forward(
    ctx: &mut Ctx<'_>,
    f: Var,
    arr: Arrangement,
    ga: &GaSpec,
    ld: &LdSpec,
) -> Result<ArrangementOutput> {
    let (_, c, _, _) = ctx.tape.value(f).dims4()?;
    if arr.has_ga() {
        ga.validate()?;
        if ga.channels != c {
            return Err(spec_err(format!(
                "GA built for {} channels, feature has {c}",
                ga.channels
            )));
        }
    }
    if arr.has_ld() {
        ld.validate()?;
    }
    let out = match arr {
        Arrangement::Gald => {
            let f_ga = ga_forward(ctx, f, ga, "ga")?;
            let m = ld_mask(ctx, f_ga, ld, "ld")?;
            let f_gald = ld_distribute(ctx, f_ga, m)?;
            ArrangementOutput {
                features: gald_fuse(ctx, f, f_gald)?,
                mask: Some(m),
            }
        }
        Arrangement::Ldga => {
            let m = ld_mask(ctx, f, ld, "ld")?;
            let f_ld = ld_distribute(ctx, f, m)?;
            let f_ga = ga_forward(ctx, f_ld, ga, "ga")?;
            ArrangementOutput {
                features: gald_fuse(ctx, f, f_ga)?,
                mask: Some(m),
            }
        }
        Arrangement::Parallel => {
            let m = ld_mask(ctx, f, ld, "ld")?;
            let f_ld = ld_distribute(ctx, f, m)?;
            let f_ga = ga_forward(ctx, f, ga, "ga")?;
            let cat = ctx.tape.concat(&[f_ld, f_ga, f], 1)?;
            let fused = conv2d(ctx, cat, &Conv2dSpec::new(3 * c, 2 * c, 1), "fuse")?;
            ArrangementOutput {
                features: fused,
                mask: Some(m),
            }
        }
        Arrangement::GaOnly => {
            let f_ga = ga_forward(ctx, f, ga, "ga")?;
            ArrangementOutput {
                features: gald_fuse(ctx, f, f_ga)?,
                mask: None,
            }
        }
        Arrangement::LdOnly => {
            let m = ld_mask(ctx, f, ld, "ld")?;
            let f_ld = ld_distribute(ctx, f, m)?;
            ArrangementOutput {
                features: gald_fuse(ctx, f, f_ld)?,
                mask: Some(m),
            }
        }
        Arrangement::Baseline => ArrangementOutput {
            features: f,
            mask: None,
        },
    };
    Ok(out)
}

/// The mask of an arrangement, or [`Error::NoMaskInArrangement`].
pub fn require_mask(arr: Arrangement, out: &ArrangementOutput) -> Result<Var> {
    out.mask
        .ok_or_else(|| Error::NoMaskInArrangement(arr.as_str().to_string()))
}
