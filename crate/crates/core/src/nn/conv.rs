//! 2-D cross-correlation with stride, zero padding, dilation and groups,
//! lowered to im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, spec_err, Result};
use crate::nn::params::{Ctx, Init};
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Square `k x k` kernel, stride 1, no padding, one group, with bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            bias: true,
        }
    }

    /// Depth-wise `k x k` convolution (one filter per channel).
    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self::new(channels, channels, k).groups(channels)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.in_ch == self.out_ch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_ch,
            self.out_ch,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(spec_err(format!("non-positive conv parameter in {self:?}")));
        }
        if !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(spec_err(format!(
                "channels {} -> {} not divisible by {} groups",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel.0, self.kernel.1]
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |n: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            (n + 2 * p >= span).then(|| (n + 2 * p - span) / s + 1)
        };
        match (
            out(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0),
            out(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(spec_err(format!("conv {self:?} yields empty output for {h}x{w}"))),
        }
    }

    /// Xavier fans counted over kernel taps per group.
    pub fn fans(&self) -> (usize, usize) {
        let taps = self.kernel.0 * self.kernel.1;
        (self.in_ch / self.groups * taps, self.out_ch / self.groups * taps)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    spec: Conv2dSpec,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.spec.in_ch / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.spec.out_ch / self.spec.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.spec.kernel.0 * self.spec.kernel.1
    }

    fn is_pointwise(&self) -> bool {
        let s = &self.spec;
        s.kernel == (1, 1) && s.stride == (1, 1) && s.padding == (0, 0)
    }

    /// For output coordinate `o` and tap `t` along one axis, the input
    /// coordinate or `None` when it falls in the zero padding.
    fn src(o: usize, t: usize, stride: usize, pad: usize, dil: usize, n: usize) -> Option<usize> {
        let pos = (o * stride + t * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    /// Fills `col` (`col_rows x oh*ow`) with the patches of channels
    /// `[c0, c0 + cin_g)` of one image.
    fn im2col(&self, img: &[f64], c0: usize, col: &mut [f64]) {
        let s = &self.spec;
        let (kh, kw) = s.kernel;
        let plane = self.oh * self.ow;
        for c in 0..self.cin_g() {
            let chan = &img[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let sy = Self::src(oy, ki, s.stride.0, s.padding.0, s.dilation.0, self.h);
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match sy {
                            None => line.iter_mut().for_each(|v| *v = 0.0),
                            Some(sy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match Self::src(ox, kj, s.stride.1, s.padding.1, s.dilation.1, self.w) {
                                        Some(sx) => chan[sy * self.w + sx],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the image gradient (adjoint of im2col).
    fn col2im(&self, col: &[f64], c0: usize, img: &mut [f64]) {
        let s = &self.spec;
        let (kh, kw) = s.kernel;
        let plane = self.oh * self.ow;
        for c in 0..self.cin_g() {
            let chan = &mut img[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let Some(sy) = Self::src(oy, ki, s.stride.0, s.padding.0, s.dilation.0, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(sx) = Self::src(ox, kj, s.stride.1, s.padding.1, s.dilation.1, self.w) {
                                chan[sy * self.w + sx] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geo: Geometry,
}

impl Backward for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let geo = &self.geo;
        let (x, wt) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad_output;
        let (cin, cout) = (geo.spec.in_ch, geo.spec.out_ch);
        let (cin_g, cout_g, rows) = (geo.cin_g(), geo.cout_g(), geo.col_rows());
        let (in_plane, out_plane) = (geo.h * geo.w, geo.oh * geo.ow);
        let need_x = ctx.needs[0];
        let need_w = ctx.needs[1];

        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        let mut gw = need_w.then(|| vec![0.0; wt.len()]);
        let pointwise = geo.is_pointwise();
        let mut col = vec![0.0; if pointwise { 0 } else { rows * out_plane }];
        let mut dcol = vec![0.0; rows * out_plane];

        for n in 0..geo.n {
            let img = &x[n * cin * in_plane..(n + 1) * cin * in_plane];
            let gout = &g[n * cout * out_plane..(n + 1) * cout * out_plane];
            for grp in 0..geo.spec.groups {
                let go = &gout[grp * cout_g * out_plane..(grp + 1) * cout_g * out_plane];
                let wg = &wt[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                if let Some(gw) = gw.as_mut() {
                    let cols: &[f64] = if pointwise {
                        &img[grp * cin_g * in_plane..(grp + 1) * cin_g * in_plane]
                    } else {
                        geo.im2col(img, grp * cin_g, &mut col);
                        &col
                    };
                    gemm(
                        cout_g,
                        out_plane,
                        rows,
                        go,
                        false,
                        cols,
                        true,
                        &mut gw[grp * cout_g * rows..(grp + 1) * cout_g * rows],
                        true,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    let gimg = &mut gx[n * cin * in_plane..(n + 1) * cin * in_plane];
                    if pointwise {
                        gemm(
                            rows,
                            cout_g,
                            out_plane,
                            wg,
                            true,
                            go,
                            false,
                            &mut gimg[grp * cin_g * in_plane..(grp + 1) * cin_g * in_plane],
                            true,
                        );
                    } else {
                        gemm(rows, cout_g, out_plane, wg, true, go, false, &mut dcol, false);
                        geo.col2im(&dcol, grp * cin_g, gimg);
                    }
                }
            }
        }

        let mut out = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| {
                let mut gb = vec![0.0; cout];
                for n in 0..geo.n {
                    for (c, b) in gb.iter_mut().enumerate() {
                        let off = (n * cout + c) * out_plane;
                        *b += g[off..off + out_plane].iter().sum::<f64>();
                    }
                }
                gb
            }));
        }
        out
    }
}

impl Tape {
    /// Raw convolution of `x` (`N x Cin x H x W`) with weight
    /// `Cout x Cin/groups x kh x kw` and optional bias `Cout`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        spec.validate()?;
        let (n, c, h, w) = self.value(x).dims4()?;
        if c != spec.in_ch {
            return Err(shape_err(format!(
                "conv expects {} input channels, got {c}",
                spec.in_ch
            )));
        }
        if self.shape(weight) != spec.weight_shape() {
            return Err(shape_err(format!(
                "conv weight {:?}, expected {:?}",
                self.shape(weight),
                spec.weight_shape()
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [spec.out_ch] {
                return Err(shape_err(format!("conv bias {:?}", self.shape(b))));
            }
        }
        let (oh, ow) = spec.output_size(h, w)?;
        let geo = Geometry {
            spec: *spec,
            n,
            h,
            w,
            oh,
            ow,
        };
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let (cin_g, cout_g, rows) = (geo.cin_g(), geo.cout_g(), geo.col_rows());
        let (in_plane, out_plane) = (h * w, oh * ow);
        let mut out = vec![0.0; n * spec.out_ch * out_plane];
        let pointwise = geo.is_pointwise();
        let mut col = vec![0.0; if pointwise { 0 } else { rows * out_plane }];
        for b in 0..n {
            let img = &xd[b * c * in_plane..(b + 1) * c * in_plane];
            for grp in 0..spec.groups {
                let cols: &[f64] = if pointwise {
                    &img[grp * cin_g * in_plane..(grp + 1) * cin_g * in_plane]
                } else {
                    geo.im2col(img, grp * cin_g, &mut col);
                    &col
                };
                let off = (b * spec.out_ch + grp * cout_g) * out_plane;
                gemm(
                    cout_g,
                    rows,
                    out_plane,
                    &wd[grp * cout_g * rows..(grp + 1) * cout_g * rows],
                    false,
                    cols,
                    false,
                    &mut out[off..off + cout_g * out_plane],
                    false,
                );
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for b in 0..n {
                for (co, &bias) in bd.iter().enumerate() {
                    let off = (b * spec.out_ch + co) * out_plane;
                    out[off..off + out_plane].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(&[n, spec.out_ch, oh, ow], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(weight)).chain(bias).collect();
        Ok(self.record(value, &inputs, Conv2dBackward { geo }))
    }
}

/// Convolution layer whose weight and bias live at `{name}.weight` and
/// `{name}.bias`.
pub fn conv2d(ctx: &mut Ctx<'_>, x: Var, spec: &Conv2dSpec, name: &str) -> Result<Var> {
    spec.validate()?;
    let (fan_in, fan_out) = spec.fans();
    let w = ctx.param(
        &format!("{name}.weight"),
        &spec.weight_shape(),
        Init::XavierUniform { fan_in, fan_out },
    )?;
    let b = if spec.bias {
        Some(ctx.param(&format!("{name}.bias"), &[spec.out_ch], Init::Zeros)?)
    } else {
        None
    };
    ctx.tape.conv2d(x, w, b, spec)
}
